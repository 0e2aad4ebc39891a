"""Command-line entry point: phantom generation, scanning, both stages, diagnostics.

Subcommands: ``ctbuq phantom|scan|stage1|stage2|run|diagnose|plot``.  All
configuration lives in a single versioned JSON document (see
:func:`parse_config`); ``--preset`` supplies a built-in starting document
and ``--config`` overrides it.  Exit codes: 0 success, 1 I/O or parse
error, 2 infeasible configuration, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diagnostics as diag
from ._svg import SvgCanvas, annulus_band
from .forward import (
    NoiseModel,
    ScanGeometry,
    Sinogram,
    add_noise,
    radon_functional,
    read_sinogram_csv,
    snr,
    write_sinogram_csv,
)
from .inference import NumericalError, Rect, SamplerConfig, load_chain_jsonl, save_chain_jsonl
from .pipeline import (
    InclusionFailure,
    PosteriorSummary,
    Stage1Config,
    Stage1Result,
    Stage2Config,
    radius_samples,
    stage1,
    stage2_detailed,
)
from .priors import (
    AttenuationLevels,
    BackgroundConfig,
    InfeasibleConfigurationError,
    Phantom,
    PhantomConfig,
    load_phantom,
    save_phantom,
)
from .randfield import Field2D, Grid2D, MaternParams

EXIT_OK = 0
EXIT_IO = 1
EXIT_INFEASIBLE = 2
EXIT_NUMERICAL = 3

CONFIG_SCHEMA = "ctbuq-config/1"


# -- configuration ------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    master_seed: int
    geometry: ScanGeometry
    phantom: PhantomConfig | None
    noise_level: float | None
    sigma_noise: float | None
    stage1: Stage1Config
    stage2: Stage2Config


_ALLOWED_TOP = {
    "schema", "master_seed", "geometry", "phantom", "noise", "stage1", "stage2",
}


def _check_keys(doc: dict, allowed: set[str], where: str) -> None:
    unknown = set(doc) - allowed
    if unknown:
        raise ValueError(f"unknown config keys in {where}: {sorted(unknown)}")


def _matern_from(doc: dict, where: str) -> MaternParams:
    _check_keys(doc, {"gamma", "tau", "amplitude", "mean", "exact_spectrum"}, where)
    return MaternParams(**doc)


def _sampler_from(doc: dict, where: str) -> SamplerConfig:
    allowed = {
        "b1", "b2", "n_pcn", "n_mh", "n_samples", "warmup_sweeps",
        "target_acceptance", "warmup_n_pcn", "warmup_n_mh",
    }
    _check_keys(doc, allowed, where)
    doc = dict(doc)
    if "target_acceptance" in doc:
        doc["target_acceptance"] = tuple(doc["target_acceptance"])
    return SamplerConfig(**doc)


def parse_config(doc: dict) -> ExperimentConfig:
    """Validate a config document; unknown keys are rejected."""
    if doc.get("schema") != CONFIG_SCHEMA:
        raise ValueError(f"config schema must be {CONFIG_SCHEMA!r}, got {doc.get('schema')!r}")
    _check_keys(doc, _ALLOWED_TOP, "top level")

    g = doc["geometry"]
    _check_keys(g, {"theta_max_deg", "n_theta", "n_s"}, "geometry")
    geometry = ScanGeometry(np.deg2rad(g["theta_max_deg"]), g["n_theta"], g["n_s"])

    noise = doc.get("noise", {})
    _check_keys(noise, {"level_pct", "sigma"}, "noise")
    noise_level = noise.get("level_pct")
    sigma_noise = noise.get("sigma")
    if (noise_level is None) == (sigma_noise is None):
        raise ValueError("noise must set exactly one of level_pct or sigma")

    ph = doc.get("phantom")
    phantom_cfg = None
    levels = AttenuationLevels(0.1, 1.0)
    if ph is not None:
        allowed = {
            "n_inc", "a_minus", "a_plus", "gamma", "amplitude", "mean", "n_kl",
            "background", "d_min_separation", "d_min_boundary", "max_rejections",
        }
        _check_keys(ph, allowed, "phantom")
        levels = AttenuationLevels(ph.get("a_minus", 0.1), ph.get("a_plus", 1.0))
        gammas = ph.get("gamma", 3.0)
        if not isinstance(gammas, list):
            gammas = [gammas]
        params = tuple(
            MaternParams(
                gamma=float(gam),
                tau=1.0,
                amplitude=ph.get("amplitude", 0.25),
                mean=ph.get("mean", float(np.log(0.3))),
            )
            for gam in gammas
        )
        background = None
        if ph.get("background") is not None:
            bg = ph["background"]
            _check_keys(bg, {"gamma", "tau", "n_kl", "grid_n"}, "phantom.background")
            background = BackgroundConfig(
                params=MaternParams(
                    gamma=bg.get("gamma", 2.5),
                    tau=bg.get("tau", 50.0),
                    amplitude=1.0,
                    mean=float(np.log(levels.a_minus)),
                ),
                grid_n=bg.get("grid_n", 100),
                n_kl=bg.get("n_kl"),
            )
        phantom_cfg = PhantomConfig(
            n_inc=ph.get("n_inc", 1),
            levels=levels,
            inclusion_params=params,
            n_kl=ph.get("n_kl", 100),
            background=background,
            d_min_separation=ph.get("d_min_separation", 0.1),
            d_min_boundary=ph.get("d_min_boundary", 0.1),
            max_rejections=ph.get("max_rejections", 10_000),
        )

    s1 = dict(doc.get("stage1", {}))
    _check_keys(
        s1,
        {"gamma", "tau", "grid_n", "n_kl", "burn_in", "min_pixels", "sampler", "d_min_separation"},
        "stage1",
    )
    sampler1 = _sampler_from(s1.get("sampler", {}), "stage1.sampler") if "sampler" in s1 else Stage1Config.__dataclass_fields__["sampler"].default
    stage1_cfg = Stage1Config(
        levels=levels,
        sigma_noise=1.0,  # placeholder; bound to the scan noise at run time
        params=MaternParams(gamma=s1.get("gamma", 3.0), tau=s1.get("tau", 50.0)),
        sampler=sampler1,
        grid_n=s1.get("grid_n"),
        n_kl=s1.get("n_kl"),
        burn_in=s1.get("burn_in", 0.1),
        min_pixels=s1.get("min_pixels", 4),
        d_min_separation=s1.get("d_min_separation", 0.1),
    )

    s2 = dict(doc.get("stage2", {}))
    _check_keys(
        s2,
        {
            "gamma", "amplitude", "mean", "n_kl", "burn_in", "sampler", "hpd_level",
            "n_band", "mode_grid", "min_mode_samples", "threads", "n_radial",
        },
        "stage2",
    )
    sampler2 = _sampler_from(s2.get("sampler", {}), "stage2.sampler") if "sampler" in s2 else Stage2Config.__dataclass_fields__["sampler"].default
    stage2_cfg = Stage2Config(
        levels=levels,
        sigma_noise=1.0,  # placeholder; bound at run time
        params=MaternParams(
            gamma=s2.get("gamma", 3.0),
            tau=1.0,
            amplitude=s2.get("amplitude", 0.25),
            mean=s2.get("mean", float(np.log(0.3))),
        ),
        n_kl=s2.get("n_kl", 100),
        sampler=sampler2,
        hpd_level=s2.get("hpd_level", 0.99),
        n_band=s2.get("n_band", 128),
        burn_in=s2.get("burn_in", 0.1),
        mode_grid=s2.get("mode_grid", 64),
        min_mode_samples=s2.get("min_mode_samples", 100),
        n_radial=s2.get("n_radial", 2048),
        threads=s2.get("threads", 1),
    )

    return ExperimentConfig(
        master_seed=int(doc.get("master_seed", 0)),
        geometry=geometry,
        phantom=phantom_cfg,
        noise_level=noise_level,
        sigma_noise=sigma_noise,
        stage1=stage1_cfg,
        stage2=stage2_cfg,
    )


PRESETS: dict[str, dict] = {
    # single smooth inclusion, full angles, 1% noise
    "single-smooth": {
        "schema": CONFIG_SCHEMA,
        "master_seed": 1,
        "geometry": {"theta_max_deg": 180.0, "n_theta": 100, "n_s": 100},
        "noise": {"level_pct": 1.0},
        "phantom": {"n_inc": 1, "gamma": 3.0, "background": {"gamma": 2.5, "tau": 50.0}},
        "stage2": {"gamma": 3.0},
    },
    # rougher boundary regularity
    "single-rough": {
        "schema": CONFIG_SCHEMA,
        "master_seed": 2,
        "geometry": {"theta_max_deg": 180.0, "n_theta": 100, "n_s": 100},
        "noise": {"level_pct": 1.0},
        "phantom": {"n_inc": 1, "gamma": 2.0, "background": {"gamma": 2.5, "tau": 50.0}},
        "stage2": {"gamma": 2.0},
    },
    # three smooth inclusions
    "multi3": {
        "schema": CONFIG_SCHEMA,
        "master_seed": 3,
        "geometry": {"theta_max_deg": 180.0, "n_theta": 100, "n_s": 100},
        "noise": {"level_pct": 1.0},
        "phantom": {
            "n_inc": 3,
            "gamma": [3.0, 3.0, 3.0],
            "n_kl": 100,
            "background": {"gamma": 2.5, "tau": 50.0, "n_kl": 200},
        },
        "stage2": {"gamma": 3.0},
    },
    # ten angles over the full range
    "sparse": {
        "schema": CONFIG_SCHEMA,
        "master_seed": 4,
        "geometry": {"theta_max_deg": 180.0, "n_theta": 10, "n_s": 100},
        "noise": {"level_pct": 1.0},
        "phantom": {"n_inc": 1, "gamma": 2.5},
        "stage2": {"gamma": 2.5},
    },
    # restricted angular range
    "limited": {
        "schema": CONFIG_SCHEMA,
        "master_seed": 5,
        "geometry": {"theta_max_deg": 45.0, "n_theta": 10, "n_s": 100},
        "noise": {"level_pct": 1.0},
        "phantom": {"n_inc": 1, "gamma": 2.5},
        "stage2": {"gamma": 2.5},
    },
    # ingestion-only stub for external parallel-beam sinogram CSVs
    "lotus-ingest": {
        "schema": CONFIG_SCHEMA,
        "master_seed": 6,
        "geometry": {"theta_max_deg": 180.0, "n_theta": 100, "n_s": 100},
        "noise": {"level_pct": 1.0},
        "phantom": {"n_inc": 1, "a_minus": 0.001, "a_plus": 0.025},
        "stage1": {"gamma": 3.0, "tau": 50.0},
        "stage2": {"gamma": 3.0, "mean": -2.0},
    },
}


def _dump_json(doc, path: Path) -> None:
    path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def _load_config(args) -> tuple[ExperimentConfig, dict]:
    doc: dict = {}
    if getattr(args, "preset", None):
        if args.preset not in PRESETS:
            raise ValueError(f"unknown preset {args.preset!r}; choose from {sorted(PRESETS)}")
        doc = json.loads(json.dumps(PRESETS[args.preset]))
    if getattr(args, "config", None):
        loaded = json.loads(Path(args.config).read_text())
        doc = _merge(doc, loaded) if doc else loaded
    if not doc:
        raise ValueError("provide --config and/or --preset")
    if getattr(args, "seed", None) is not None:
        doc["master_seed"] = args.seed
    if getattr(args, "threads", None) is not None:
        doc.setdefault("stage2", {})["threads"] = args.threads
    return parse_config(doc), doc


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


# -- field CSV (grid format) --------------------------------------------------
#
# Line 1: "nx,ny,spacing,origin_x,origin_y"; then nx rows of ny values,
# row ix holding values[ix, :].


def write_field_csv(field: Field2D, path: str | Path) -> None:
    lines = [f"{field.nx},{field.ny},{field.spacing!r},{field.origin[0]!r},{field.origin[1]!r}"]
    for row in field.values:
        lines.append(",".join(f"{v!r}" for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_field_csv(path: str | Path) -> Field2D:
    lines = Path(path).read_text().strip().splitlines()
    head = lines[0].split(",")
    nx, ny = int(head[0]), int(head[1])
    grid = Grid2D(nx, ny, float(head[2]), (float(head[3]), float(head[4])))
    values = np.array([line.split(",") for line in lines[1:]], dtype=float)
    return Field2D(grid, values)


# -- derived seeds ------------------------------------------------------------


def _seeds(master: int) -> dict[str, np.random.SeedSequence]:
    root = np.random.SeedSequence(master)
    phantom, scan, s1, s2 = root.spawn(4)
    return {"phantom": phantom, "scan": scan, "stage1": s1, "stage2": s2}


# -- plotting helpers ---------------------------------------------------------


def _plot_field(field: Field2D, path: Path, title: str) -> None:
    canvas = SvgCanvas((-1, 1), (-1, 1), title=title)
    half = field.spacing / 2
    extent = (
        field.origin[0] - half,
        field.origin[0] + (field.nx - 1) * field.spacing + half,
        field.origin[1] - half,
        field.origin[1] + (field.ny - 1) * field.spacing + half,
    )
    canvas.heatmap(field.values, extent)
    canvas.frame()
    canvas.write(path)


def _plot_sinogram(sino: Sinogram, path: Path) -> None:
    g = sino.geometry
    canvas = SvgCanvas((0, np.rad2deg(g.theta_max)), (-1, 1), title="sinogram")
    canvas.heatmap(sino.values, (0, np.rad2deg(g.theta_max), -1, 1))
    canvas.frame()
    canvas.write(path)


def _plot_summary(
    summary: PosteriorSummary,
    path: Path,
    truth: Phantom | None = None,
    truth_index: int | None = None,
) -> None:
    canvas = SvgCanvas((-1, 1), (-1, 1), title=f"inclusion {summary.inclusion_index}")
    circle = np.linspace(0, 2 * np.pi, 257)
    canvas.polyline(np.cos(circle), np.sin(circle), color="gray", width=0.8)
    band = summary.radial_band[0]
    coeffs, center = summary.per_mode_mean[0]
    if band is not None:
        annulus_band(canvas, center, band.angles, band.lower, band.upper)
        closed = np.concatenate((band.angles, band.angles[:1]))
        mean_r = np.concatenate((band.mean, band.mean[:1]))
        canvas.polyline(center[0] + mean_r * np.cos(closed), center[1] + mean_r * np.sin(closed), color="blue")
    canvas.marker(center[0], center[1], color="blue")
    if truth is not None and truth_index is not None and truth_index < len(truth.inclusions):
        from .priors import boundary_polyline

        poly = boundary_polyline(truth.inclusions[truth_index], 256)
        xs = np.concatenate((poly[:, 0], poly[:1, 0]))
        ys = np.concatenate((poly[:, 1], poly[:1, 1]))
        canvas.polyline(xs, ys, color="red", width=1.2)
        canvas.marker(*truth.inclusions[truth_index].center, color="red")
    canvas.frame()
    canvas.write(path)


def _plot_acf(rho: np.ndarray, path: Path) -> None:
    canvas = SvgCanvas((0, len(rho) - 1), (min(0.0, float(rho.min())), 1.0), title="autocorrelation")
    canvas.polyline(np.arange(len(rho)), rho, color="black")
    canvas.frame()
    canvas.write(path)


# -- summary serialization ----------------------------------------------------


def summary_to_json(summary: PosteriorSummary) -> dict:
    bands = []
    for band in summary.radial_band:
        if band is None:
            bands.append(None)
        else:
            bands.append(
                [
                    [float(a), float(lo), float(m), float(hi)]
                    for a, lo, m, hi in zip(band.angles, band.lower, band.mean, band.upper)
                ]
            )
    return {
        "schema": "ctbuq-summary/1",
        "inclusion_index": summary.inclusion_index,
        "hpd_level": summary.hpd_level,
        "n_modes": summary.n_modes,
        "mode_sizes": [int(m.size) for m in summary.hpd_modes],
        "mode_means": [
            {"center": list(center), "coeffs": coeffs.coeffs.tolist()}
            for coeffs, center in summary.per_mode_mean
        ],
        "bands": bands,
        "global_variance": summary.global_variance,
        "ess": summary.ess,
        "acceptance_rates": list(summary.acceptance_rates),
        "n_samples": summary.n_samples,
        "b1": summary.b1,
        "b2": summary.b2,
    }


def _stage1_to_json(result: Stage1Result) -> dict:
    return {
        "schema": "ctbuq-stage1/1",
        "n_inc": result.n_inc,
        "centers": [list(c) for c in result.centers],
        "boxes": [[b.xmin, b.xmax, b.ymin, b.ymax] for b in result.boxes],
        "overlap_warning": result.overlap_warning,
        "b1": result.b1,
        "pcn_rate": result.pcn_rate,
    }


def _stage1_from_json(doc: dict, mean_image: Field2D, pointwise: Field2D) -> Stage1Result:
    return Stage1Result(
        mean_field_image=mean_image,
        pointwise_mean_image=pointwise,
        n_inc=doc["n_inc"],
        centers=tuple(tuple(c) for c in doc["centers"]),
        boxes=tuple(Rect(*b) for b in doc["boxes"]),
        overlap_warning=doc["overlap_warning"],
        b1=doc["b1"],
        pcn_rate=doc["pcn_rate"],
    )


# -- subcommands ---------------------------------------------------------------


def _cmd_phantom(args) -> int:
    config, _ = _load_config(args)
    if config.phantom is None:
        raise ValueError("config has no phantom section")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    from .priors import evaluate_attenuation, sample_phantom

    rng = np.random.default_rng(_seeds(config.master_seed)["phantom"])
    phantom = sample_phantom(config.phantom, rng)
    save_phantom(phantom, out / "phantom.json")

    grid = Grid2D.centered(config.geometry.n_s)
    pts = np.stack(
        np.meshgrid(grid.x_centers(), grid.y_centers(), indexing="ij"), axis=-1
    )
    raster = Field2D(grid, evaluate_attenuation(phantom, pts))
    write_field_csv(raster, out / "phantom_raster.csv")
    _plot_field(raster, out / "phantom.svg", "phantom")
    print(f"phantom with {len(phantom.inclusions)} inclusion(s) -> {out}")
    return EXIT_OK


def _cmd_scan(args) -> int:
    config, _ = _load_config(args)
    phantom = load_phantom(args.phantom)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    clean = radon_functional(phantom, config.geometry)
    rng = np.random.default_rng(_seeds(config.master_seed)["scan"])
    noisy, model = add_noise(
        clean, rng, sigma=config.sigma_noise, noise_level=config.noise_level
    )
    write_sinogram_csv(clean, out / "sinogram_clean.csv")
    write_sinogram_csv(noisy, out / "sinogram.csv")
    realized_snr, realized_pct = snr(clean, noisy.values - clean.values)
    _dump_json(
        {
            "schema": "ctbuq-noise/1",
            "sigma_noise": model.sigma_noise,
            "dimension": model.dimension,
            "requested_level_pct": config.noise_level,
            "realized_level_pct": realized_pct,
            "realized_snr": realized_snr,
        },
        out / "noise.json",
    )
    _plot_sinogram(noisy, out / "sinogram.svg")
    print(f"scan: {config.geometry.n_theta} angles x {config.geometry.n_s} detectors -> {out}")
    return EXIT_OK


def _bind_sigma(config: ExperimentConfig, sinogram: Sinogram, noise_json: Path | None):
    """Resolve the noise sigma for inference: explicit, from metadata, or from level."""
    if config.sigma_noise is not None:
        return config.sigma_noise
    if noise_json is not None and noise_json.exists():
        return json.loads(noise_json.read_text())["sigma_noise"]
    return (config.noise_level / 100.0) * sinogram.norm() / np.sqrt(sinogram.values.size)


def _run_stage1(config: ExperimentConfig, sino: Sinogram, sigma: float) -> Stage1Result:
    from dataclasses import replace

    cfg = replace(config.stage1, sigma_noise=sigma, levels=config.stage2.levels)
    rng = np.random.default_rng(_seeds(config.master_seed)["stage1"])
    return stage1(sino, cfg, rng)


def _emit_stage1(result: Stage1Result, out: Path) -> None:
    _dump_json(_stage1_to_json(result), out / "stage1.json")
    write_field_csv(result.mean_field_image, out / "stage1_mean_field.csv")
    write_field_csv(result.pointwise_mean_image, out / "stage1_pointwise_mean.csv")
    _plot_field(result.mean_field_image, out / "stage1_mean_field.svg", "mean-field image")
    _plot_field(result.pointwise_mean_image, out / "stage1_pointwise_mean.svg", "pointwise mean")


def _cmd_stage1(args) -> int:
    config, _ = _load_config(args)
    sino = read_sinogram_csv(args.sinogram)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sigma = _bind_sigma(config, sino, Path(args.noise) if args.noise else None)
    result = _run_stage1(config, sino, sigma)
    _emit_stage1(result, out)
    print(f"stage1: {result.n_inc} inclusion(s), centers {list(result.centers)}")
    return EXIT_OK


def _run_stage2(config: ExperimentConfig, sino: Sinogram, s1: Stage1Result, sigma: float):
    from dataclasses import replace

    cfg = replace(config.stage2, sigma_noise=sigma)
    return stage2_detailed(sino, s1, cfg, _seeds(config.master_seed)["stage2"]), cfg


def _emit_stage2(results, cfg: Stage2Config, out: Path, truth: Phantom | None) -> int:
    failures = 0
    acf_done = False
    for res, chain in results:
        if isinstance(res, InclusionFailure):
            failures += 1
            _dump_json(
                {"schema": "ctbuq-summary/1", "inclusion_index": res.inclusion_index,
                 "error": res.message},
                out / f"summary_{res.inclusion_index}.json",
            )
            continue
        idx = res.inclusion_index
        _dump_json(summary_to_json(res), out / f"summary_{idx}.json")
        save_chain_jsonl(
            chain,
            out / f"chain_{idx}.jsonl",
            meta={
                "stage": 2,
                "inclusion_index": idx,
                "n_kl": cfg.n_kl,
                "gamma": cfg.params.gamma,
                "tau": cfg.params.tau,
                "amplitude": cfg.params.amplitude,
                "mean": cfg.params.mean,
            },
        )
        band = res.radial_band[0]
        if band is not None:
            lines = ["angle,lower,mean,upper"]
            for a, lo, m, hi in zip(band.angles, band.lower, band.mean, band.upper):
                lines.append(f"{a!r},{lo!r},{m!r},{hi!r}")
            (out / f"band_{idx}.csv").write_text("\n".join(lines) + "\n")
        _plot_summary(res, out / f"boundary_{idx}.svg", truth, idx)
        if not acf_done and res.hpd_modes[0].size > 8:
            first = res.hpd_modes[0]
            burn = chain.coeffs.shape[0] - res.n_samples
            radius0 = radius_samples(
                chain.coeffs[burn:][first], cfg.params, np.array([0.0])
            )[:, 0]
            rho = diag.acf(radius0, min(200, radius0.size - 1))
            lines = ["lag,rho"] + [f"{i},{r!r}" for i, r in enumerate(rho)]
            (out / "acf.csv").write_text("\n".join(lines) + "\n")
            _plot_acf(rho, out / "acf.svg")
            acf_done = True
        print(
            f"inclusion {idx}: modes={res.n_modes} gvar={res.global_variance:.4g} "
            f"ess={res.ess:.1f} acc={res.acceptance_rates[0]:.2f}/{res.acceptance_rates[1]:.2f}"
        )
    return failures


def _cmd_stage2(args) -> int:
    config, _ = _load_config(args)
    sino = read_sinogram_csv(args.sinogram)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sigma = _bind_sigma(config, sino, Path(args.noise) if args.noise else None)
    doc = json.loads(Path(args.stage1).read_text())
    mean_image = read_field_csv(Path(args.stage1).parent / "stage1_mean_field.csv")
    pointwise = read_field_csv(Path(args.stage1).parent / "stage1_pointwise_mean.csv")
    s1 = _stage1_from_json(doc, mean_image, pointwise)
    truth = load_phantom(args.truth) if args.truth else None
    results, cfg = _run_stage2(config, sino, s1, sigma)
    failures = _emit_stage2(results, cfg, out, truth)
    return EXIT_NUMERICAL if failures == len(results) else EXIT_OK


def _cmd_run(args) -> int:
    config, _ = _load_config(args)
    sino = read_sinogram_csv(args.sinogram)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sigma = _bind_sigma(config, sino, Path(args.noise) if args.noise else None)
    truth = load_phantom(args.truth) if args.truth else None

    _plot_sinogram(sino, out / "sinogram.svg")
    s1 = _run_stage1(config, sino, sigma)
    _emit_stage1(s1, out)
    print(f"stage1: {s1.n_inc} inclusion(s)")

    results, cfg = _run_stage2(config, sino, s1, sigma)
    failures = _emit_stage2(results, cfg, out, truth)
    return EXIT_NUMERICAL if failures and failures == len(results) else EXIT_OK


def _cmd_diagnose(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report: dict = {"schema": "ctbuq-diagnostics/1", "chains": [], "warnings": []}
    curves = []
    common_angles = np.arange(64) * (2 * np.pi / 64)
    for path in args.chains:
        meta, arrays = load_chain_jsonl(path)
        entry: dict = {"path": str(path), "n": int(arrays["phis"].size)}
        try:
            n_kl = int(meta["n_kl"])
            params = MaternParams(
                gamma=meta["gamma"], tau=meta.get("tau", 1.0),
                amplitude=meta.get("amplitude", 1.0), mean=meta.get("mean", 0.0),
            )
            coeffs = arrays["coeffs"].reshape(-1, n_kl, 2)
            radius0 = radius_samples(coeffs, params, np.array([0.0]))[:, 0]
            max_lag = min(200, radius0.size - 1)
            rho = diag.acf(radius0, max_lag)
            entry["ess"] = diag.ess(radius0)
            entry["acf_first_decorrelation_lag"] = diag.first_decorrelation_lag(radius0)
            lines = ["lag,rho"] + [f"{i},{r!r}" for i, r in enumerate(rho)]
            stem = Path(path).stem
            (out / f"acf_{stem}.csv").write_text("\n".join(lines) + "\n")
            _plot_acf(rho, out / f"acf_{stem}.svg")
            curves.append(radius_samples(coeffs, params, common_angles).mean(axis=0))
        except (ValueError, KeyError) as exc:
            entry["error"] = str(exc)
            report["warnings"].append(f"{path}: {exc}")
        report["chains"].append(entry)
    if len(curves) >= 2:
        report["mean_curve_max_distance"] = diag.multi_chain_mean_check(curves)
    _dump_json(report, out / "diagnostics.json")
    print(json.dumps({k: v for k, v in report.items() if k != "chains"}, sort_keys=True))
    return EXIT_OK


def _cmd_plot(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    wrote = []
    if args.sinogram:
        sino = read_sinogram_csv(args.sinogram)
        _plot_sinogram(sino, out / "sinogram.svg")
        wrote.append("sinogram.svg")
    if args.field:
        field = read_field_csv(args.field)
        _plot_field(field, out / (Path(args.field).stem + ".svg"), Path(args.field).stem)
        wrote.append(Path(args.field).stem + ".svg")
    if not wrote:
        raise ValueError("plot: provide --sinogram and/or --field")
    print("wrote " + ", ".join(wrote))
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors are I/O-class failures, exit 1
        raise ValueError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="ctbuq", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="experiment config JSON")
            p.add_argument("--preset", help=f"built-in preset: {', '.join(sorted(PRESETS))}")
            p.add_argument("--seed", type=int, help="override master seed")
            p.add_argument("--threads", type=int, help="stage-2 worker cap")
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("phantom", help="sample an admissible phantom")
    common(p)
    p.set_defaults(func=_cmd_phantom)

    p = sub.add_parser("scan", help="simulate a noisy sinogram of a phantom")
    common(p)
    p.add_argument("--phantom", required=True)
    p.set_defaults(func=_cmd_scan)

    p = sub.add_parser("stage1", help="localize inclusions from a sinogram")
    common(p)
    p.add_argument("--sinogram", required=True)
    p.add_argument("--noise", help="noise metadata JSON from scan")
    p.set_defaults(func=_cmd_stage1)

    p = sub.add_parser("stage2", help="per-inclusion boundary posteriors")
    common(p)
    p.add_argument("--sinogram", required=True)
    p.add_argument("--stage1", required=True, help="stage1.json from the stage1 command")
    p.add_argument("--noise", help="noise metadata JSON from scan")
    p.add_argument("--truth", help="phantom JSON for overlay plots")
    p.set_defaults(func=_cmd_stage2)

    p = sub.add_parser("run", help="stage1 + stage2 + plots")
    common(p)
    p.add_argument("--sinogram", required=True)
    p.add_argument("--noise", help="noise metadata JSON from scan")
    p.add_argument("--truth", help="phantom JSON for overlay plots")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("diagnose", help="ACF/ESS/multi-chain agreement from chain files")
    common(p, config=False)
    p.add_argument("--chains", nargs="+", required=True)
    p.set_defaults(func=_cmd_diagnose)

    p = sub.add_parser("plot", help="re-render SVG figures from CSV artifacts")
    common(p, config=False)
    p.add_argument("--sinogram")
    p.add_argument("--field")
    p.set_defaults(func=_cmd_plot)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except InfeasibleConfigurationError as exc:
        print(f"error: infeasible configuration: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (NumericalError, FloatingPointError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

"""Two-stage boundary detection pipeline.

Stage 1 samples a level-set posterior with pCN, thresholds the coefficient
mean, and segments the result into inclusion candidates with centers of
mass and margin-padded bounding boxes.  Stage 2 runs an independent
star-shaped Gibbs chain per inclusion and condenses each into a
:class:`PosteriorSummary`: HPD modes of the center samples, per-mode mean
boundaries, a per-angle radial credibility band, a global variance, and
sampler diagnostics.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.ndimage

from .diagnostics import ess as _ess
from .diagnostics import hpd_1d
from .forward import NoiseModel, Sinogram
from .inference import (
    Chain,
    LevelSetForward,
    LikelihoodContext,
    NumericalError,
    Rect,
    SamplerConfig,
    StarShapeForward,
    make_state,
    run_chain,
)
from .priors import AttenuationLevels, level_set_map
from .randfield import BoundaryCoeffs, Field2D, Grid2D, MaternParams, kl_weight

__all__ = [
    "EmptyResultError",
    "Component",
    "Stage1Config",
    "Stage1Result",
    "Stage2Config",
    "RadialBand",
    "PosteriorSummary",
    "InclusionFailure",
    "segment",
    "bounding_boxes",
    "stage1",
    "stage2",
    "stage2_detailed",
    "run_inclusion_chain",
    "global_variance",
    "radius_samples",
    "radial_band",
]


class EmptyResultError(Exception):
    """Stage 1 found no inclusion candidates."""


FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])


@dataclass(frozen=True)
class Component:
    """One 4-connected foreground component of a segmented image."""

    pixels: np.ndarray          # (k, 2) integer (ix, iy) indices
    center_of_mass: tuple[float, float]
    pixel_bounds: tuple[int, int, int, int]  # ixmin, ixmax, iymin, iymax

    @property
    def size(self) -> int:
        return self.pixels.shape[0]


def segment(image: Field2D, threshold: float, min_pixels: int = 4) -> list[Component]:
    """4-connected components of ``image > threshold``.

    Components smaller than ``min_pixels`` are discarded as noise.  Each
    center of mass is the unweighted mean of the member pixel centers.
    """
    fg = image.values > threshold
    labels, n_labels = scipy.ndimage.label(fg, structure=FOUR_CONNECTED)
    components = []
    for lab in range(1, n_labels + 1):
        ix, iy = np.nonzero(labels == lab)
        if ix.size < min_pixels:
            continue
        cx = image.origin[0] + image.spacing * float(ix.mean())
        cy = image.origin[1] + image.spacing * float(iy.mean())
        components.append(
            Component(
                pixels=np.column_stack((ix, iy)),
                center_of_mass=(cx, cy),
                pixel_bounds=(int(ix.min()), int(ix.max()), int(iy.min()), int(iy.max())),
            )
        )
    return components


def bounding_boxes(
    components: list[Component],
    margin_pixels: int,
    grid: Grid2D,
) -> tuple[list[Rect], bool]:
    """Margin-padded boxes around components, clipped to the grid.

    Returns the boxes in domain coordinates plus a flag that is True when
    any two padded boxes overlap (a separation-margin risk: close
    inclusions may have been merged or may collide in stage 2).
    """
    if not components:
        raise ValueError("no components to box")
    rects = []
    for comp in components:
        ixmin, ixmax, iymin, iymax = comp.pixel_bounds
        ixmin = max(ixmin - margin_pixels, 0)
        iymin = max(iymin - margin_pixels, 0)
        ixmax = min(ixmax + margin_pixels, grid.nx - 1)
        iymax = min(iymax + margin_pixels, grid.ny - 1)
        half = grid.spacing / 2.0
        rects.append(
            Rect(
                grid.origin[0] + ixmin * grid.spacing - half,
                grid.origin[0] + ixmax * grid.spacing + half,
                grid.origin[1] + iymin * grid.spacing - half,
                grid.origin[1] + iymax * grid.spacing + half,
            )
        )
    overlap = any(
        rects[i].intersects(rects[j])
        for i in range(len(rects))
        for j in range(i + 1, len(rects))
    )
    return rects, overlap


@dataclass(frozen=True)
class Stage1Config:
    """Level-set localization settings."""

    levels: AttenuationLevels
    sigma_noise: float
    params: MaternParams = MaternParams(gamma=3.0, tau=50.0)
    sampler: SamplerConfig = SamplerConfig(
        b1=0.1, n_pcn=100, n_samples=3000, warmup_sweeps=10
    )
    grid_n: int | None = None   # image resolution; defaults to the detector count
    n_kl: int | None = None     # optional spectral truncation of the 2D prior
    burn_in: float = 0.1
    min_pixels: int = 4
    d_min_separation: float = 0.1
    h: float | None = None


@dataclass(frozen=True)
class Stage1Result:
    """Localization output: mean images, candidate count, centers, boxes."""

    mean_field_image: Field2D       # level-set map of the coefficient mean
    pointwise_mean_image: Field2D   # sample mean of the mapped images
    n_inc: int
    centers: tuple[tuple[float, float], ...]
    boxes: tuple[Rect, ...]
    overlap_warning: bool
    b1: float
    pcn_rate: float


def _disk_mask(grid: Grid2D) -> np.ndarray:
    x = grid.x_centers()[:, None]
    y = grid.y_centers()[None, :]
    return x * x + y * y < 1.0


def stage1(y: Sinogram, config: Stage1Config, rng: np.random.Generator) -> Stage1Result:
    """Localize inclusions from a sinogram via the level-set posterior.

    Runs a pCN chain, pushes the coefficient mean through the level-set
    map, and segments the thresholded mean.  Pixels outside the unit disk
    carry no data and are clamped to the background before segmentation.
    Raises :class:`EmptyResultError` when nothing is found.
    """
    grid_n = config.grid_n if config.grid_n is not None else y.geometry.n_s
    grid = Grid2D.centered(grid_n)
    forward = LevelSetForward(
        y.geometry, grid, config.params, config.levels, n_kl=config.n_kl, h=config.h
    )
    ctx = LikelihoodContext(y, NoiseModel(config.sigma_noise, y.values.size), forward)
    init = make_state(ctx, rng.standard_normal(forward.coeff_shape))
    chain = run_chain(init, ctx, config.sampler, rng)

    burn = int(round(config.burn_in * len(chain)))
    kept = chain.coeffs[burn:]
    if kept.shape[0] == 0:
        raise EmptyResultError("stage 1 chain recorded no post-burn-in samples")

    mean_field = forward.field(kept.mean(axis=0))
    levels = config.levels
    mean_image = level_set_map(Field2D(grid, mean_field), levels)

    accum = np.zeros(forward.coeff_shape)
    for sample in kept:
        accum += np.where(forward.field(sample) < 0, levels.a_minus, levels.a_plus)
    pointwise = accum / kept.shape[0]

    mask = _disk_mask(grid)
    mean_values = np.where(mask, mean_image.values, levels.a_minus)
    pointwise_values = np.where(mask, pointwise, levels.a_minus)
    mean_image = Field2D(grid, mean_values)
    pointwise_image = Field2D(grid, pointwise_values)

    threshold = 0.5 * (levels.a_minus + levels.a_plus)
    components = segment(mean_image, threshold, config.min_pixels)
    if not components:
        raise EmptyResultError(
            "no inclusion candidates above threshold "
            f"{threshold:g} (max mean image value {mean_values.max():g})"
        )

    margin_pixels = int(np.ceil(config.d_min_separation / (2.0 * grid.spacing)))
    boxes, overlap = bounding_boxes(components, margin_pixels, grid)
    return Stage1Result(
        mean_field_image=mean_image,
        pointwise_mean_image=pointwise_image,
        n_inc=len(components),
        centers=tuple(c.center_of_mass for c in components),
        boxes=tuple(boxes),
        overlap_warning=overlap,
        b1=chain.b1,
        pcn_rate=chain.pcn_rate,
    )


# -- stage 2 ------------------------------------------------------------------


@dataclass(frozen=True)
class Stage2Config:
    """Per-inclusion boundary estimation settings."""

    levels: AttenuationLevels
    sigma_noise: float
    params: MaternParams
    n_kl: int = 100
    sampler: SamplerConfig = SamplerConfig(
        b1=0.2,
        b2=0.02,
        n_pcn=5,
        n_mh=5,
        n_samples=2000,
        warmup_sweeps=15,
        warmup_n_pcn=50,
        warmup_n_mh=50,
    )
    hpd_level: float = 0.99
    n_band: int = 128
    burn_in: float = 0.1
    mode_grid: int = 64
    min_mode_samples: int = 100
    h: float | None = None
    n_radial: int = 2048
    threads: int = 1


@dataclass(frozen=True)
class RadialBand:
    """Per-angle credibility band around a mean boundary radius."""

    angles: np.ndarray
    lower: np.ndarray
    mean: np.ndarray
    upper: np.ndarray
    level: float


@dataclass(frozen=True)
class PosteriorSummary:
    """Chain summary for one inclusion.

    Modes partition (a subset of) the post-burn-in samples by the HPD
    structure of the center samples; mode 0 is the most populated one and
    is what the headline band, global variance, and ESS refer to.
    """

    inclusion_index: int
    hpd_modes: tuple[np.ndarray, ...]
    per_mode_mean: tuple[tuple[BoundaryCoeffs, tuple[float, float]], ...]
    radial_band: tuple[RadialBand | None, ...]
    global_variance: float
    ess: float
    acceptance_rates: tuple[float, float]
    hpd_level: float
    n_samples: int
    b1: float
    b2: float

    @property
    def n_modes(self) -> int:
        return len(self.hpd_modes)


@dataclass(frozen=True)
class InclusionFailure:
    """Recorded instead of a summary when a per-inclusion chain fails."""

    inclusion_index: int
    message: str


def _coeff_basis(params: MaternParams, n_kl: int, angles: np.ndarray) -> np.ndarray:
    k = np.arange(1, n_kl + 1)
    w = np.asarray(kl_weight(params, k))
    basis = np.empty((angles.size, 2 * n_kl))
    basis[:, 0::2] = np.sin(np.outer(angles, k)) * w
    basis[:, 1::2] = np.cos(np.outer(angles, k)) * w
    return basis


def radius_samples(coeffs: np.ndarray, params: MaternParams, angles: np.ndarray) -> np.ndarray:
    """Boundary radii ``exp(xi(angle))`` for a stack of coefficient samples.

    ``coeffs`` has shape (n, n_kl, 2); the result is (n, len(angles)).
    """
    arr = np.asarray(coeffs)
    n, n_kl = arr.shape[0], arr.shape[1]
    basis = _coeff_basis(params, n_kl, np.asarray(angles, dtype=float))
    return np.exp(params.mean + arr.reshape(n, 2 * n_kl) @ basis.T)


def radial_band(
    coeffs: np.ndarray,
    params: MaternParams,
    angles: np.ndarray,
    level: float,
    mean_coeffs: np.ndarray | None = None,
) -> RadialBand:
    """HPD envelope of the radius samples at each angle.

    Per angle the HPD set of ``exp(xi(angle))`` over the samples is
    collapsed to its envelope (min lower edge, max upper edge).  The mean
    curve is the radius of the mean coefficients.
    """
    angles = np.asarray(angles, dtype=float)
    radii = radius_samples(coeffs, params, angles)
    lower = np.empty(angles.size)
    upper = np.empty(angles.size)
    for i in range(angles.size):
        intervals = hpd_1d(radii[:, i], level)
        lower[i] = intervals[0][0]
        upper[i] = intervals[-1][1]
    if mean_coeffs is None:
        mean_coeffs = np.asarray(coeffs).mean(axis=0)
    mean_curve = radius_samples(mean_coeffs[None, ...], params, angles)[0]
    return RadialBand(angles, lower, mean_curve, upper, level)


def global_variance(samples, params: MaternParams) -> float:
    """Mean squared L2([0, 2pi)) distance of the boundary field to its mean.

    By Parseval this is ``pi * mean_j sum_k w_k^2 * |coeff_j,k - mean_k|^2``
    with the expansion weights ``w_k``.
    """
    if isinstance(samples, (list, tuple)):
        arr = np.stack([s.coeffs if isinstance(s, BoundaryCoeffs) else np.asarray(s) for s in samples])
    else:
        arr = np.asarray(samples, dtype=float)
    if arr.ndim != 3 or arr.shape[0] < 2:
        raise ValueError("need at least two coefficient samples of shape (n_kl, 2)")
    w = np.asarray(kl_weight(params, np.arange(1, arr.shape[1] + 1)))
    dev = arr - arr.mean(axis=0)
    per_sample = np.sum((dev**2) * (w**2)[None, :, None], axis=(1, 2))
    return float(np.pi * per_sample.mean())


def _partition_center_modes(
    centers: np.ndarray,
    box: Rect,
    grid_n: int,
    level: float,
) -> list[np.ndarray]:
    """HPD mode partition of center samples on a grid over the box.

    Bins are sorted by density; the smallest super-level set holding
    ``level`` of the samples is split into 4-connected components, and
    each sample joins the component containing its bin.  Samples outside
    the super-level set belong to no mode.  Modes come back ordered by
    population, largest first.
    """
    n = centers.shape[0]
    wx = max(box.xmax - box.xmin, 1e-12)
    wy = max(box.ymax - box.ymin, 1e-12)
    ix = np.clip(((centers[:, 0] - box.xmin) / wx * grid_n).astype(np.int64), 0, grid_n - 1)
    iy = np.clip(((centers[:, 1] - box.ymin) / wy * grid_n).astype(np.int64), 0, grid_n - 1)
    flat = ix * grid_n + iy
    counts = np.bincount(flat, minlength=grid_n * grid_n)

    order = np.argsort(-counts, kind="stable")
    cum = np.cumsum(counts[order])
    k = int(np.searchsorted(cum, level * n)) + 1
    selected = np.zeros(grid_n * grid_n, dtype=bool)
    selected[order[:k]] = True

    labels, n_labels = scipy.ndimage.label(
        selected.reshape(grid_n, grid_n), structure=FOUR_CONNECTED
    )
    sample_labels = labels.ravel()[flat]
    sample_labels[~selected[flat]] = 0
    modes = [np.nonzero(sample_labels == lab)[0] for lab in range(1, n_labels + 1)]
    modes = [m for m in modes if m.size > 0]
    modes.sort(key=lambda m: (-m.size, m[0]))
    return modes


def _summarize_inclusion(
    index: int,
    chain: Chain,
    forward: StarShapeForward,
    config: Stage2Config,
    box: Rect,
) -> PosteriorSummary:
    burn = int(round(config.burn_in * len(chain)))
    coeffs = chain.coeffs[burn:]
    centers = chain.centers[burn:]
    if coeffs.shape[0] < 2:
        raise ValueError("chain too short to summarize")

    modes = _partition_center_modes(centers, box, config.mode_grid, config.hpd_level)
    if not modes:
        modes = [np.arange(coeffs.shape[0])]

    band_angles = np.arange(config.n_band) * (2.0 * np.pi / config.n_band)
    per_mode_mean = []
    bands: list[RadialBand | None] = []
    for m in modes:
        mean_c = coeffs[m].mean(axis=0)
        mean_center = centers[m].mean(axis=0)
        per_mode_mean.append((BoundaryCoeffs(mean_c), (float(mean_center[0]), float(mean_center[1]))))
        if m.size >= config.min_mode_samples:
            bands.append(
                radial_band(coeffs[m], forward.params, band_angles, config.hpd_level, mean_coeffs=mean_c)
            )
        else:
            bands.append(None)

    first = modes[0]
    gvar = global_variance(coeffs[first], forward.params) if first.size >= 2 else float("nan")
    if first.size >= 4:
        radius0 = radius_samples(coeffs[first], forward.params, np.array([0.0]))[:, 0]
        try:
            ess_value = _ess(radius0)
        except ValueError:
            ess_value = float("nan")
    else:
        ess_value = float("nan")

    return PosteriorSummary(
        inclusion_index=index,
        hpd_modes=tuple(modes),
        per_mode_mean=tuple(per_mode_mean),
        radial_band=tuple(bands),
        global_variance=gvar,
        ess=ess_value,
        acceptance_rates=(chain.pcn_rate, chain.mh_rate),
        hpd_level=config.hpd_level,
        n_samples=coeffs.shape[0],
        b1=chain.b1,
        b2=chain.b2,
    )


def run_inclusion_chain(
    y: Sinogram,
    center: tuple[float, float],
    box: Rect,
    config: Stage2Config,
    rng: np.random.Generator,
) -> tuple[Chain, StarShapeForward]:
    """Tune and run the Gibbs chain for a single inclusion."""
    forward = StarShapeForward(
        y.geometry, config.params, config.n_kl, config.levels,
        h=config.h, n_radial=config.n_radial,
    )
    ctx = LikelihoodContext(
        y, NoiseModel(config.sigma_noise, y.values.size), forward, box=box
    )
    init = make_state(ctx, np.zeros((config.n_kl, 2)), center)
    chain = run_chain(init, ctx, config.sampler, rng)
    return chain, forward


def stage2_detailed(
    y: Sinogram,
    stage1_result: Stage1Result,
    config: Stage2Config,
    seed: int | np.random.SeedSequence,
) -> list[tuple[PosteriorSummary | InclusionFailure, Chain | None]]:
    """Like :func:`stage2` but also returns each inclusion's raw chain."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    children = ss.spawn(stage1_result.n_inc)

    def one(index: int) -> tuple[PosteriorSummary | InclusionFailure, Chain | None]:
        rng = np.random.default_rng(children[index])
        try:
            chain, forward = run_inclusion_chain(
                y, stage1_result.centers[index], stage1_result.boxes[index], config, rng
            )
            summary = _summarize_inclusion(
                index, chain, forward, config, stage1_result.boxes[index]
            )
            return summary, chain
        except (NumericalError, ValueError) as exc:
            return InclusionFailure(index, str(exc)), None

    indices = range(stage1_result.n_inc)
    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            return list(pool.map(one, indices))
    return [one(i) for i in indices]


def stage2(
    y: Sinogram,
    stage1_result: Stage1Result,
    config: Stage2Config,
    seed: int | np.random.SeedSequence,
) -> list[PosteriorSummary | InclusionFailure]:
    """Boundary estimation and uncertainty for every stage-1 inclusion.

    Inclusions run independently on streams spawned from ``seed`` by
    inclusion index, so results do not depend on execution order and can
    run on ``config.threads`` workers.  A failing chain yields an
    :class:`InclusionFailure` in its slot; the others are unaffected.
    """
    return [summary for summary, _ in stage2_detailed(y, stage1_result, config, seed)]

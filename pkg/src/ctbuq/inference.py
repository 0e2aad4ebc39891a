"""Likelihood evaluation and MCMC kernels.

The preconditioned Crank-Nicolson (pCN) kernel updates function-valued
components in their standard-normal coefficient representation, so the
proposal ``zeta = sqrt(1-b^2) xi + b rho`` mixes in a fresh prior draw
without ever forming the covariance.  Inclusion centers move by random-walk
Metropolis restricted to a bounding box.  A Metropolis-within-Gibbs sweep
composes the two, and a multiplicative warm-up rule tunes both step sizes
toward a target acceptance band.

Likelihood contexts are immutable and shareable; every chain owns its
state and random generator.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .forward import NoiseModel, ScanGeometry, Sinogram, default_step, radon_matrix, ray_quadrature
from .priors import AttenuationLevels
from .randfield import Grid2D, MaternParams, SpectralField2D, kl_weight

__all__ = [
    "NumericalError",
    "Rect",
    "ChainState",
    "SamplerConfig",
    "LikelihoodContext",
    "LevelSetForward",
    "StarShapeForward",
    "Chain",
    "TuneResult",
    "neg_log_likelihood",
    "make_state",
    "pcn_step",
    "rwm_center_step",
    "gibbs_sweep",
    "run_chain",
    "tune",
    "save_chain_jsonl",
    "load_chain_jsonl",
]


class NumericalError(RuntimeError):
    """A forward evaluation produced non-finite values."""


@dataclass(frozen=True)
class Rect:
    """Axis-aligned rectangle used as a center bounding box."""

    xmin: float
    xmax: float
    ymin: float
    ymax: float

    def __post_init__(self) -> None:
        if self.xmin > self.xmax or self.ymin > self.ymax:
            raise ValueError("degenerate rectangle")

    def contains(self, p) -> bool:
        return bool(
            self.xmin <= p[0] <= self.xmax and self.ymin <= p[1] <= self.ymax
        )

    def intersects(self, other: "Rect") -> bool:
        return not (
            self.xmax < other.xmin
            or other.xmax < self.xmin
            or self.ymax < other.ymin
            or other.ymax < self.ymin
        )

    @property
    def center(self) -> tuple[float, float]:
        return ((self.xmin + self.xmax) / 2, (self.ymin + self.ymax) / 2)


@dataclass(frozen=True)
class ChainState:
    """Coefficients, optional center, and the cached negative log-likelihood."""

    coeffs: np.ndarray
    center: np.ndarray | None
    phi: float


@dataclass(frozen=True)
class SamplerConfig:
    """Step sizes, within-sweep loop counts, and warm-up settings.

    ``warmup_n_pcn``/``warmup_n_mh`` override the inner loop counts during
    warm-up only (the sampling counts are often much smaller).
    """

    b1: float = 0.3
    b2: float = 0.05
    n_pcn: int = 20
    n_mh: int = 20
    n_samples: int = 1000
    warmup_sweeps: int = 0
    target_acceptance: tuple[float, float] = (0.15, 0.25)
    warmup_n_pcn: int | None = None
    warmup_n_mh: int | None = None

    def __post_init__(self) -> None:
        if not (0.0 <= self.b1 <= 1.0):
            raise ValueError(f"b1 must be in [0, 1], got {self.b1}")
        if self.b2 < 0:
            raise ValueError("b2 must be >= 0")
        lo, hi = self.target_acceptance
        if not (0 <= lo < hi <= 1):
            raise ValueError("target_acceptance must be an interval inside [0, 1]")


class LevelSetForward:
    """Stage-1 forward: white-noise grid -> 2D field -> two-level image -> sinogram.

    The coefficient representation is the real white-noise array feeding
    the spectral sampler, so pCN operates on i.i.d. standard normals.
    """

    def __init__(
        self,
        geometry: ScanGeometry,
        grid: Grid2D,
        params: MaternParams,
        levels: AttenuationLevels,
        n_kl: int | None = None,
        h: float | None = None,
    ):
        self.geometry = geometry
        self.grid = grid
        self.levels = levels
        self.params = params
        self.sampler = SpectralField2D(params, grid, n_kl=n_kl)
        self.h = default_step(geometry) if h is None else float(h)
        self._matrix = radon_matrix(geometry, grid, self.h)

    @property
    def coeff_shape(self) -> tuple[int, int]:
        return self.sampler.coeff_shape

    def field(self, coeffs: np.ndarray) -> np.ndarray:
        return self.sampler.transform(coeffs)

    def predict(self, coeffs: np.ndarray, center=None) -> np.ndarray:
        image = np.where(self.field(coeffs) < 0, self.levels.a_minus, self.levels.a_plus)
        return self._matrix @ image.ravel()


class StarShapeForward:
    """Stage-2 forward: one star-shaped inclusion over a constant background.

    Quadrature nodes along every ray are precomputed once; per state the
    log-radius is evaluated on a fine uniform angle grid (``n_radial``
    points) and looked up by linear interpolation.  Nodes farther from the
    center than the state's maximum radius are provably outside and are
    skipped, and the node polar data is memoized per center so the pCN
    inner loop (center fixed) avoids recomputing angles.  The memo makes
    instances stateful: do not share one instance between concurrently
    running chains.
    """

    def __init__(
        self,
        geometry: ScanGeometry,
        params: MaternParams,
        n_kl: int,
        levels: AttenuationLevels,
        h: float | None = None,
        n_radial: int = 2048,
    ):
        params.require_lipschitz()
        self.geometry = geometry
        self.params = params
        self.n_kl = int(n_kl)
        self.levels = levels
        self.h = default_step(geometry) if h is None else float(h)
        self.n_radial = int(n_radial)
        quad = ray_quadrature(geometry, self.h)
        self._px = quad.px
        self._py = quad.py
        self._w = quad.weights
        self._background = levels.a_minus * quad.chords
        counts = np.diff(np.concatenate((quad.starts, [quad.px.size])))
        self._ray_ids = np.repeat(np.arange(quad.starts.size), counts)
        self._n_rays = quad.starts.size

        angles = np.arange(self.n_radial) * (2.0 * np.pi / self.n_radial)
        k = np.arange(1, self.n_kl + 1)
        w = np.asarray(kl_weight(params, k))
        basis = np.empty((self.n_radial, 2 * self.n_kl))
        basis[:, 0::2] = np.sin(np.outer(angles, k)) * w
        basis[:, 1::2] = np.cos(np.outer(angles, k)) * w
        self._basis = basis
        self._memo: dict | None = None

    @property
    def coeff_shape(self) -> tuple[int, int]:
        return (self.n_kl, 2)

    def radius_grid(self, coeffs: np.ndarray) -> np.ndarray:
        """Boundary radius on the internal uniform angle grid."""
        return np.exp(self.params.mean + self._basis @ np.asarray(coeffs).ravel())

    def _polar(self, center, r_max: float) -> dict:
        """Node polar data near ``center``, reused while the center is fixed."""
        memo = self._memo
        if (
            memo is not None
            and memo["cx"] == center[0]
            and memo["cy"] == center[1]
            and r_max <= memo["r_cut"]
        ):
            return memo
        dx = self._px - center[0]
        dy = self._py - center[1]
        rho2 = dx * dx + dy * dy
        r_cut = 1.5 * r_max
        sel = np.flatnonzero(rho2 < r_cut * r_cut)
        pos = np.arctan2(dy[sel], dx[sel]) * (self.n_radial / (2.0 * np.pi))
        i0 = np.floor(pos)
        frac = pos - i0
        i0 = i0.astype(np.int64) % self.n_radial
        memo = {
            "cx": center[0],
            "cy": center[1],
            "r_cut": r_cut,
            "rho2": rho2[sel],
            "i0": i0,
            "i1": (i0 + 1) % self.n_radial,
            "frac": frac,
            "w": self._w[sel],
            "rays": self._ray_ids[sel],
        }
        self._memo = memo
        return memo

    def predict(self, coeffs: np.ndarray, center) -> np.ndarray:
        r = self.radius_grid(coeffs)
        polar = self._polar(center, float(r.max()))
        r_at = r[polar["i0"]] * (1.0 - polar["frac"]) + r[polar["i1"]] * polar["frac"]
        inside = polar["rho2"] < r_at * r_at
        seg = np.bincount(polar["rays"], weights=inside * polar["w"], minlength=self._n_rays)
        return self._background + (self.levels.a_plus - self.levels.a_minus) * seg


@dataclass(frozen=True)
class LikelihoodContext:
    """Observation, noise model, forward evaluator, and optional center box."""

    data: Sinogram
    noise: NoiseModel
    forward: object
    box: Rect | None = None

    def __post_init__(self) -> None:
        if self.noise.sigma_noise <= 0:
            raise ValueError("likelihood requires sigma_noise > 0")
        if self.noise.dimension != self.data.values.size:
            raise ValueError("noise dimension does not match the data")
        y = self.data.values.ravel().copy()
        y.setflags(write=False)
        object.__setattr__(self, "_y", y)


def neg_log_likelihood(ctx: LikelihoodContext, state: ChainState) -> float:
    """Least-squares misfit ``0.5 * sum((y - g)^2) / sigma^2``."""
    return _phi(ctx, state.coeffs, state.center)


def _phi(ctx: LikelihoodContext, coeffs: np.ndarray, center) -> float:
    g = ctx.forward.predict(coeffs, center)
    if not np.all(np.isfinite(g)):
        raise NumericalError("forward prediction is not finite")
    r = ctx._y - g
    return float(0.5 * (r @ r) / ctx.noise.sigma_noise**2)


def make_state(ctx: LikelihoodContext, coeffs: np.ndarray, center=None) -> ChainState:
    c = None if center is None else np.asarray(center, dtype=float)
    return ChainState(np.asarray(coeffs, dtype=float), c, _phi(ctx, coeffs, c))


def pcn_step(
    state: ChainState,
    ctx: LikelihoodContext,
    b1: float,
    rng: np.random.Generator,
) -> tuple[ChainState, bool]:
    """One pCN update of the coefficient block; the center stays put.

    Accepts with probability ``min(1, exp(phi_old - phi_new))`` - prior
    density ratios cancel exactly for this proposal.
    """
    rho = rng.standard_normal(state.coeffs.shape)
    proposal = np.sqrt(1.0 - b1 * b1) * state.coeffs + b1 * rho
    phi_new = _phi(ctx, proposal, state.center)
    log_u = np.log(rng.random())
    if log_u < state.phi - phi_new:
        return ChainState(proposal, state.center, phi_new), True
    return state, False


def rwm_center_step(
    state: ChainState,
    ctx: LikelihoodContext,
    b2: float,
    box: Rect,
    rng: np.random.Generator,
) -> tuple[ChainState, bool]:
    """Random-walk Metropolis update of the center, uniform prior on ``box``.

    Proposals landing outside the box are rejected immediately; inside the
    box the uniform prior cancels and the acceptance ratio is the bare
    likelihood ratio.
    """
    proposal = state.center + b2 * rng.standard_normal(2)
    if not box.contains(proposal):
        return state, False
    phi_new = _phi(ctx, state.coeffs, proposal)
    log_u = np.log(rng.random())
    if log_u < state.phi - phi_new:
        return ChainState(state.coeffs, proposal, phi_new), True
    return state, False


@dataclass(frozen=True)
class SweepStats:
    pcn_accepted: int
    pcn_total: int
    mh_accepted: int
    mh_total: int


def gibbs_sweep(
    state: ChainState,
    ctx: LikelihoodContext,
    config: SamplerConfig,
    rng: np.random.Generator,
    n_pcn: int | None = None,
    n_mh: int | None = None,
) -> tuple[ChainState, SweepStats]:
    """``n_pcn`` pCN steps followed by ``n_mh`` center steps."""
    n_pcn = config.n_pcn if n_pcn is None else n_pcn
    n_mh = config.n_mh if n_mh is None else n_mh
    acc_pcn = 0
    for _ in range(n_pcn):
        state, ok = pcn_step(state, ctx, config.b1, rng)
        acc_pcn += ok
    acc_mh = 0
    if state.center is not None:
        for _ in range(n_mh):
            state, ok = rwm_center_step(state, ctx, config.b2, ctx.box, rng)
            acc_mh += ok
    else:
        n_mh = 0
    return state, SweepStats(acc_pcn, n_pcn, acc_mh, n_mh)


@dataclass(frozen=True)
class TuneResult:
    b1: float
    b2: float
    state: ChainState
    pcn_rates: tuple[float, ...]
    mh_rates: tuple[float, ...]


def tune(
    ctx: LikelihoodContext,
    init: ChainState,
    config: SamplerConfig,
    rng: np.random.Generator,
) -> TuneResult:
    """Warm-up phase with multiplicative step-size adaptation.

    After each warm-up sweep a step size grows by 1.5x when its acceptance
    rate exceeds the target band and shrinks by 2/3 when it falls below;
    ``b1`` stays clamped to [0, 1].  Rates inside the band leave the step
    unchanged, so the rule has the band as its fixed point.
    """
    if config.warmup_sweeps < 1:
        raise ValueError("tune requires warmup_sweeps >= 1")
    lo, hi = config.target_acceptance
    b1, b2 = config.b1, config.b2
    state = init
    n_pcn = config.warmup_n_pcn if config.warmup_n_pcn is not None else config.n_pcn
    n_mh = config.warmup_n_mh if config.warmup_n_mh is not None else config.n_mh
    pcn_rates: list[float] = []
    mh_rates: list[float] = []
    for _ in range(config.warmup_sweeps):
        cfg = replace(config, b1=b1, b2=b2)
        state, stats = gibbs_sweep(state, ctx, cfg, rng, n_pcn=n_pcn, n_mh=n_mh)
        if stats.pcn_total:
            rate = stats.pcn_accepted / stats.pcn_total
            pcn_rates.append(rate)
            if rate > hi:
                b1 = min(1.0, b1 * 1.5)
            elif rate < lo:
                b1 = b1 * (2.0 / 3.0)
        if stats.mh_total:
            rate = stats.mh_accepted / stats.mh_total
            mh_rates.append(rate)
            if rate > hi:
                b2 = b2 * 1.5
            elif rate < lo:
                b2 = b2 * (2.0 / 3.0)
    return TuneResult(b1, b2, state, tuple(pcn_rates), tuple(mh_rates))


@dataclass(frozen=True)
class Chain:
    """Recorded snapshots of one MCMC run plus its acceptance trace.

    Stage-1 chains (no center) record one snapshot per pCN step; Gibbs
    chains record one per sweep.
    """

    coeffs: np.ndarray            # (n, *coeff_shape)
    centers: np.ndarray | None    # (n, 2) or None
    phis: np.ndarray              # (n,)
    pcn_accepted: np.ndarray      # (n,)
    pcn_total: np.ndarray         # (n,)
    mh_accepted: np.ndarray       # (n,)
    mh_total: np.ndarray          # (n,)
    b1: float
    b2: float

    def __len__(self) -> int:
        return self.phis.shape[0]

    @property
    def pcn_rate(self) -> float:
        tot = int(self.pcn_total.sum())
        return float(self.pcn_accepted.sum() / tot) if tot else float("nan")

    @property
    def mh_rate(self) -> float:
        tot = int(self.mh_total.sum())
        return float(self.mh_accepted.sum() / tot) if tot else float("nan")


def run_chain(
    init: ChainState,
    ctx: LikelihoodContext,
    config: SamplerConfig,
    rng: np.random.Generator,
) -> Chain:
    """Tune (when configured), then record ``n_samples`` post-warm-up states.

    Deterministic under a fixed generator seed.
    """
    b1, b2 = config.b1, config.b2
    state = init
    if config.warmup_sweeps > 0:
        result = tune(ctx, init, config, rng)
        b1, b2, state = result.b1, result.b2, result.state
    cfg = replace(config, b1=b1, b2=b2)

    n = config.n_samples
    gibbs_mode = state.center is not None
    coeffs = np.empty((n,) + state.coeffs.shape)
    centers = np.empty((n, 2)) if gibbs_mode else None
    phis = np.empty(n)
    acc_p = np.zeros(n, dtype=np.int64)
    tot_p = np.zeros(n, dtype=np.int64)
    acc_m = np.zeros(n, dtype=np.int64)
    tot_m = np.zeros(n, dtype=np.int64)

    for idx in range(n):
        if gibbs_mode:
            state, stats = gibbs_sweep(state, ctx, cfg, rng)
            acc_p[idx], tot_p[idx] = stats.pcn_accepted, stats.pcn_total
            acc_m[idx], tot_m[idx] = stats.mh_accepted, stats.mh_total
            centers[idx] = state.center
        else:
            state, ok = pcn_step(state, ctx, cfg.b1, rng)
            acc_p[idx], tot_p[idx] = int(ok), 1
        coeffs[idx] = state.coeffs
        phis[idx] = state.phi

    return Chain(coeffs, centers, phis, acc_p, tot_p, acc_m, tot_m, b1, b2)


# -- chain records ------------------------------------------------------------
#
# Snapshots serialize to a line-delimited file: a metadata line first, then
# one JSON object per snapshot with the sweep index, the misfit, the center
# (when present), and the flattened coefficient vector.


def save_chain_jsonl(chain: Chain, path: str | Path, meta: dict | None = None) -> None:
    lines = [json.dumps({"meta": dict(meta or {})}, sort_keys=True)]
    for idx in range(len(chain)):
        rec = {
            "sweep": idx,
            "phi": float(chain.phis[idx]),
            "coeffs": chain.coeffs[idx].ravel().tolist(),
        }
        if chain.centers is not None:
            rec["center"] = chain.centers[idx].tolist()
        lines.append(json.dumps(rec, sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n")


def load_chain_jsonl(path: str | Path) -> tuple[dict, dict]:
    """Read a chain record file; returns (meta, arrays).

    ``arrays`` holds "coeffs" (n, d), "phis" (n,), and "centers" (n, 2)
    when centers were recorded.
    """
    lines = Path(path).read_text().strip().splitlines()
    if not lines:
        raise ValueError(f"empty chain file: {path}")
    meta = json.loads(lines[0]).get("meta", {})
    coeffs, phis, centers = [], [], []
    for line in lines[1:]:
        rec = json.loads(line)
        coeffs.append(rec["coeffs"])
        phis.append(rec["phi"])
        if "center" in rec:
            centers.append(rec["center"])
    arrays = {
        "coeffs": np.asarray(coeffs, dtype=float),
        "phis": np.asarray(phis, dtype=float),
    }
    if centers:
        arrays["centers"] = np.asarray(centers, dtype=float)
    return meta, arrays

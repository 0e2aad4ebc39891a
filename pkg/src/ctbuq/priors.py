"""Push-forward maps from Gaussian fields to piecewise-constant attenuation images.

Covers the level-set map (threshold a 2D field at zero), the log-Gaussian
map (pointwise exponential), star-shaped inclusions with a positive radial
boundary ``r(theta) = exp(xi(theta))``, phantom assembly with geometric
admissibility checks, and rejection sampling of admissible phantoms.

All types are immutable; only :func:`sample_phantom` consumes randomness,
through an explicit generator.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .randfield import (
    BoundaryCoeffs,
    Field2D,
    Grid2D,
    MaternParams,
    SpectralField2D,
    bilinear,
    evaluate_boundary_field,
    sample_boundary_coeffs,
)

__all__ = [
    "AttenuationLevels",
    "StarInclusion",
    "Phantom",
    "PhantomConfig",
    "BackgroundConfig",
    "ValidationReport",
    "Violation",
    "InfeasibleConfigurationError",
    "level_set_map",
    "log_gaussian_map",
    "star_radius",
    "contains",
    "evaluate_attenuation",
    "validate_configuration",
    "sample_phantom",
    "phantom_to_json",
    "phantom_from_json",
    "save_phantom",
    "load_phantom",
]


class InfeasibleConfigurationError(Exception):
    """Raised when rejection sampling cannot place the requested inclusions."""


@dataclass(frozen=True)
class AttenuationLevels:
    """Background and inclusion attenuation values, ``0 < a_minus < a_plus``."""

    a_minus: float
    a_plus: float

    def __post_init__(self) -> None:
        if not (0 < self.a_minus < self.a_plus):
            raise ValueError(
                f"levels must satisfy 0 < a_minus < a_plus, got {self.a_minus}, {self.a_plus}"
            )


@dataclass(frozen=True)
class StarInclusion:
    """A star-shaped region: a center plus the log-radius boundary field."""

    center: tuple[float, float]
    coeffs: BoundaryCoeffs
    params: MaternParams

    def __post_init__(self) -> None:
        c = (float(self.center[0]), float(self.center[1]))
        if c[0] ** 2 + c[1] ** 2 >= 1.0:
            raise ValueError(f"center must lie strictly inside the unit disk, got {c}")
        self.params.require_lipschitz()
        object.__setattr__(self, "center", c)


def star_radius(inclusion: StarInclusion, angle) -> np.ndarray | float:
    """Radial boundary distance ``exp(xi(angle))`` from the inclusion center."""
    r = np.exp(evaluate_boundary_field(inclusion.coeffs, inclusion.params, angle))
    return float(r) if np.ndim(angle) == 0 else r


def contains(inclusion: StarInclusion, x) -> np.ndarray | bool:
    """Strict membership test ``|x - c| < r(angle(x - c))``.

    Accepts a single point (shape (2,)) or an array of points (..., 2).
    The center itself is inside (the radius is always positive); points
    exactly on the boundary are outside.
    """
    pts = np.asarray(x, dtype=float)
    dx = pts[..., 0] - inclusion.center[0]
    dy = pts[..., 1] - inclusion.center[1]
    angles = np.arctan2(dy, dx)
    r = np.exp(evaluate_boundary_field(inclusion.coeffs, inclusion.params, angles))
    inside = dx**2 + dy**2 < r**2
    return bool(inside) if pts.ndim == 1 else inside


def boundary_polyline(inclusion: StarInclusion, n_check: int) -> np.ndarray:
    """Boundary discretized at ``n_check`` uniform angles, shape (n_check, 2)."""
    angles = np.linspace(0.0, 2.0 * np.pi, n_check, endpoint=False)
    r = np.exp(evaluate_boundary_field(inclusion.coeffs, inclusion.params, angles))
    cx, cy = inclusion.center
    return np.column_stack((cx + r * np.cos(angles), cy + r * np.sin(angles)))


@dataclass(frozen=True)
class Phantom:
    """Ground-truth scene: inclusions over a constant or log-Gaussian background.

    ``background`` is a :class:`Field2D` holding the log-attenuation
    (mean included); ``None`` means the constant background ``a_minus``.
    ``margins`` optionally records the admissibility margins the phantom
    was generated with: ``(d_min_separation, d_min_boundary)``.
    """

    inclusions: tuple[StarInclusion, ...]
    levels: AttenuationLevels
    background: Field2D | None = None
    margins: tuple[float, float] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "inclusions", tuple(self.inclusions))
        if len(self.inclusions) < 1:
            raise ValueError("a phantom needs at least one inclusion")


def level_set_map(field: Field2D, levels: AttenuationLevels) -> Field2D:
    """Two-level image: ``a_minus`` where the field is negative, ``a_plus`` elsewhere."""
    if not np.all(np.isfinite(field.values)):
        raise ValueError("field values must be finite")
    return Field2D(field.grid, np.where(field.values < 0, levels.a_minus, levels.a_plus))


_EXP_LIMIT = 700.0  # exp overflows float64 just above this


def log_gaussian_map(field: Field2D) -> Field2D:
    """Pointwise exponential of the field; output is strictly positive."""
    if not np.all(np.isfinite(field.values)):
        raise ValueError("field values must be finite")
    if np.any(np.abs(field.values) > _EXP_LIMIT):
        raise OverflowError("field values exceed the representable exponent range")
    return Field2D(field.grid, np.exp(field.values))


def evaluate_attenuation(phantom: Phantom, x) -> np.ndarray | float:
    """Attenuation at point(s) ``x``: ``a_plus`` inside any inclusion, background outside.

    The background is the constant ``a_minus`` or, for the noisy variant,
    ``exp(xi0(x))`` with the log-background bilinearly interpolated.
    The inclusion part is resolution independent.
    """
    pts = np.asarray(x, dtype=float)
    scalar = pts.ndim == 1
    p = pts[None, :] if scalar else pts
    if phantom.background is None:
        out = np.full(p.shape[:-1], phantom.levels.a_minus)
    else:
        out = np.exp(bilinear(phantom.background, p))
    inside = np.zeros(p.shape[:-1], dtype=bool)
    for inc in phantom.inclusions:
        inside |= contains(inc, p)
    out = np.where(inside, phantom.levels.a_plus, out)
    return float(out[0]) if scalar else out


# -- admissibility ----------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    """One admissibility failure.

    ``kind`` is "overlap" (inclusions intersect or contain one another),
    "boundary" (too close to the domain boundary), or "separation"
    (inclusion gap below the configured minimum).  ``measure`` carries the
    offending distance where meaningful.
    """

    kind: str
    inclusions: tuple[int, ...]
    measure: float


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...]

    @property
    def ok(self) -> bool:
        return not self.violations


def _segments_intersect(a: np.ndarray, b: np.ndarray) -> bool:
    """Any proper intersection between closed polylines ``a`` and ``b``."""

    def orient(p, q, r):
        return (q[..., 0] - p[..., 0]) * (r[..., 1] - p[..., 1]) - (
            q[..., 1] - p[..., 1]
        ) * (r[..., 0] - p[..., 0])

    a2 = np.roll(a, -1, axis=0)
    b2 = np.roll(b, -1, axis=0)
    p1 = a[:, None, :]
    p2 = a2[:, None, :]
    q1 = b[None, :, :]
    q2 = b2[None, :, :]
    d1 = orient(p1, p2, q1)
    d2 = orient(p1, p2, q2)
    d3 = orient(q1, q2, p1)
    d4 = orient(q1, q2, p2)
    return bool(np.any((d1 * d2 < 0) & (d3 * d4 < 0)))


def _point_segment_distance(points: np.ndarray, seg_a: np.ndarray, seg_b: np.ndarray) -> float:
    """Min distance from each point to any segment; returns the overall min."""
    d = seg_b - seg_a  # (m, 2)
    pa = points[:, None, :] - seg_a[None, :, :]  # (n, m, 2)
    denom = np.einsum("mj,mj->m", d, d)
    denom = np.where(denom == 0, 1.0, denom)
    t = np.clip(np.einsum("nmj,mj->nm", pa, d) / denom, 0.0, 1.0)
    closest = seg_a[None, :, :] + t[..., None] * d[None, :, :]
    dist2 = np.sum((points[:, None, :] - closest) ** 2, axis=-1)
    return float(np.sqrt(dist2.min()))


def _polyline_distance(a: np.ndarray, b: np.ndarray) -> float:
    a2 = np.roll(a, -1, axis=0)
    b2 = np.roll(b, -1, axis=0)
    return min(
        _point_segment_distance(a, b, b2),
        _point_segment_distance(b, a, a2),
    )


def validate_configuration(
    phantom: Phantom,
    d_min_separation: float,
    d_min_boundary: float,
    n_check: int = 256,
) -> ValidationReport:
    """Check the geometric admissibility of a phantom.

    Boundaries are discretized at ``n_check`` uniform angles.  Reported
    violations: overlapping inclusions, boundary points within
    ``d_min_boundary`` of the unit circle, and inclusion pairs closer than
    ``d_min_separation``.  Violations are data, not errors.
    """
    if n_check < 8:
        raise ValueError(f"n_check must be >= 8, got {n_check}")
    polys = [boundary_polyline(inc, n_check) for inc in phantom.inclusions]
    violations: list[Violation] = []

    for i, poly in enumerate(polys):
        gap = 1.0 - float(np.max(np.hypot(poly[:, 0], poly[:, 1])))
        if gap < d_min_boundary:
            violations.append(Violation("boundary", (i,), gap))

    n = len(polys)
    for i in range(n):
        for j in range(i + 1, n):
            a, b = polys[i], polys[j]
            overlap = (
                np.any(contains(phantom.inclusions[j], a))
                or np.any(contains(phantom.inclusions[i], b))
                or _segments_intersect(a, b)
            )
            if overlap:
                violations.append(Violation("overlap", (i, j), 0.0))
                continue
            dist = _polyline_distance(a, b)
            if dist < d_min_separation:
                violations.append(Violation("separation", (i, j), dist))

    return ValidationReport(tuple(violations))


# -- phantom sampling --------------------------------------------------------


@dataclass(frozen=True)
class BackgroundConfig:
    """Noisy log-Gaussian background: 2D Matern params plus raster resolution.

    ``params.mean`` should typically be ``log(a_minus)`` so the background
    fluctuates around the nominal level.
    """

    params: MaternParams
    grid_n: int = 100
    n_kl: int | None = None


@dataclass(frozen=True)
class PhantomConfig:
    """Everything :func:`sample_phantom` needs to draw one admissible scene."""

    n_inc: int
    levels: AttenuationLevels
    inclusion_params: tuple[MaternParams, ...]
    n_kl: int = 100
    background: BackgroundConfig | None = None
    d_min_separation: float = 0.1
    d_min_boundary: float = 0.1
    n_check: int = 256
    max_rejections: int = 10_000

    def __post_init__(self) -> None:
        if self.n_inc < 1:
            raise ValueError("n_inc must be >= 1")
        params = tuple(self.inclusion_params)
        if len(params) == 1 and self.n_inc > 1:
            params = params * self.n_inc
        if len(params) != self.n_inc:
            raise ValueError(
                f"need 1 or {self.n_inc} inclusion parameter sets, got {len(params)}"
            )
        object.__setattr__(self, "inclusion_params", params)


def _draw_center(rng: np.random.Generator) -> tuple[float, float]:
    # Uniform in the unit disk via the polar square-root trick; fixed draw
    # count keeps seeded streams aligned across attempts.
    u, v = rng.random(2)
    r = np.sqrt(u)
    phi = 2.0 * np.pi * v
    return (float(r * np.cos(phi)), float(r * np.sin(phi)))


def _candidate_ok(
    candidate: StarInclusion,
    placed: list[StarInclusion],
    placed_polys: list[np.ndarray],
    cfg: PhantomConfig,
) -> np.ndarray | None:
    """Polyline of the candidate if admissible against placed inclusions, else None."""
    poly = boundary_polyline(candidate, cfg.n_check)
    radii = np.hypot(poly[:, 0] - candidate.center[0], poly[:, 1] - candidate.center[1])
    gap = 1.0 - float(np.max(np.hypot(poly[:, 0], poly[:, 1])))
    if gap < cfg.d_min_boundary:
        return None
    r_max = float(radii.max())
    for other, other_poly in zip(placed, placed_polys):
        cdist = float(np.hypot(candidate.center[0] - other.center[0], candidate.center[1] - other.center[1]))
        other_rmax = float(
            np.max(np.hypot(other_poly[:, 0] - other.center[0], other_poly[:, 1] - other.center[1]))
        )
        # cheap upper bound on the gap along the line of centers
        to_other = np.arctan2(other.center[1] - candidate.center[1], other.center[0] - candidate.center[0])
        r_toward = float(star_radius(candidate, to_other))
        r_back = float(star_radius(other, to_other + np.pi))
        if cdist - r_toward - r_back < cfg.d_min_separation:
            return None
        # cheap lower bound: far enough apart that no detailed check is needed
        if cdist - r_max - other_rmax >= cfg.d_min_separation:
            continue
        if (
            np.any(contains(other, poly))
            or np.any(contains(candidate, other_poly))
            or _segments_intersect(poly, other_poly)
            or _polyline_distance(poly, other_poly) < cfg.d_min_separation
        ):
            return None
    return poly


def sample_phantom(config: PhantomConfig, rng: np.random.Generator) -> Phantom:
    """Rejection-sample a phantom satisfying the configured margins.

    Centers are uniform in the unit disk, boundary coefficients standard
    normal; candidates violating the admissibility checks are discarded.
    Raises :class:`InfeasibleConfigurationError` once ``max_rejections``
    candidates have been discarded.
    """
    placed: list[StarInclusion] = []
    polys: list[np.ndarray] = []
    rejections = 0
    while len(placed) < config.n_inc:
        params = config.inclusion_params[len(placed)]
        center = _draw_center(rng)
        coeffs = sample_boundary_coeffs(params, config.n_kl, rng)
        candidate = StarInclusion(center, coeffs, params)
        poly = _candidate_ok(candidate, placed, polys, config)
        if poly is None:
            rejections += 1
            if rejections >= config.max_rejections:
                raise InfeasibleConfigurationError(
                    f"placed {len(placed)}/{config.n_inc} inclusions after "
                    f"{rejections} rejections; margins are likely infeasible"
                )
            continue
        placed.append(candidate)
        polys.append(poly)

    background = None
    if config.background is not None:
        bg = config.background
        grid = Grid2D.centered(bg.grid_n)
        draw = SpectralField2D(bg.params, grid, n_kl=bg.n_kl).sample(rng)
        background = Field2D(grid, draw.values + bg.params.mean)

    phantom = Phantom(
        tuple(placed),
        config.levels,
        background=background,
        margins=(config.d_min_separation, config.d_min_boundary),
    )
    report = validate_configuration(
        phantom, config.d_min_separation, config.d_min_boundary, config.n_check
    )
    if not report.ok:  # sequential placement should guarantee this
        raise InfeasibleConfigurationError(f"sampled phantom failed validation: {report}")
    return phantom


# -- serialization -----------------------------------------------------------


def _params_to_json(p: MaternParams) -> dict:
    return {
        "gamma": p.gamma,
        "tau": p.tau,
        "amplitude": p.amplitude,
        "mean": p.mean,
        "exact_spectrum": p.exact_spectrum,
    }


def _params_from_json(d: dict) -> MaternParams:
    return MaternParams(
        gamma=d["gamma"],
        tau=d["tau"],
        amplitude=d["amplitude"],
        mean=d["mean"],
        exact_spectrum=d.get("exact_spectrum", False),
    )


def phantom_to_json(phantom: Phantom) -> dict:
    doc = {
        "schema": "ctbuq-phantom/1",
        "levels": {"a_minus": phantom.levels.a_minus, "a_plus": phantom.levels.a_plus},
        "margins": list(phantom.margins) if phantom.margins else None,
        "inclusions": [
            {
                "center": list(inc.center),
                "params": _params_to_json(inc.params),
                "coeffs": inc.coeffs.coeffs.tolist(),
            }
            for inc in phantom.inclusions
        ],
        "background": None,
    }
    if phantom.background is not None:
        bg = phantom.background
        doc["background"] = {
            "nx": bg.nx,
            "ny": bg.ny,
            "spacing": bg.spacing,
            "origin": list(bg.origin),
            "values": bg.values.tolist(),
        }
    return doc


def phantom_from_json(doc: dict) -> Phantom:
    if doc.get("schema") != "ctbuq-phantom/1":
        raise ValueError(f"unrecognized phantom schema: {doc.get('schema')!r}")
    levels = AttenuationLevels(**doc["levels"])
    inclusions = tuple(
        StarInclusion(
            tuple(d["center"]),
            BoundaryCoeffs(np.asarray(d["coeffs"])),
            _params_from_json(d["params"]),
        )
        for d in doc["inclusions"]
    )
    background = None
    if doc.get("background") is not None:
        b = doc["background"]
        grid = Grid2D(b["nx"], b["ny"], b["spacing"], tuple(b["origin"]))
        background = Field2D(grid, np.asarray(b["values"]))
    margins = tuple(doc["margins"]) if doc.get("margins") else None
    return Phantom(inclusions, levels, background=background, margins=margins)


def save_phantom(phantom: Phantom, path: str | Path) -> None:
    Path(path).write_text(json.dumps(phantom_to_json(phantom), sort_keys=True, indent=1))


def load_phantom(path: str | Path) -> Phantom:
    return phantom_from_json(json.loads(Path(path).read_text()))

"""Whittle-Matern Gaussian random fields.

Two samplers live here:

* 1D periodic fields on the circle, represented by a truncated
  Karhunen-Loeve expansion with standard-normal coefficient pairs.  These
  model inclusion boundaries (the log-radius as a function of polar angle).
* 2D stationary fields on a periodic box, sampled spectrally with the FFT.
  These drive the level-set background model.

All sampling takes an explicit ``numpy.random.Generator`` so that parallel
chains own independent streams.  Field containers are immutable after
construction.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

__all__ = [
    "MaternParams",
    "BoundaryCoeffs",
    "Grid2D",
    "Field2D",
    "SpectralField2D",
    "kl_weight",
    "sample_boundary_coeffs",
    "evaluate_boundary_field",
    "sample_field_2d",
    "bilinear",
    "boundary_prior_variance",
]


@dataclass(frozen=True)
class MaternParams:
    """Hyperparameters of a Whittle-Matern covariance ``(tau^2 I - Lap)^-gamma``.

    Parameters
    ----------
    gamma : float
        Smoothness.  Boundary (1D) fields require ``gamma > 1`` so that
        samples are Lipschitz; the 2D sampler accepts any ``gamma >= 0``
        (``gamma = 0`` degenerates to white noise).
    tau : float
        Inverse correlation length.
    amplitude : float
        Multiplicative constant of the 1D expansion weights.
    mean : float
        Constant mean added to 1D field evaluations.  The 2D sampler
        returns zero-mean draws; callers add the mean where needed.
    exact_spectrum : bool
        When True the 1D weights use the circle-Laplacian eigenvalues
        ``(tau^2 + k^2)^(-gamma/2)`` instead of the default power law
        ``k^-gamma`` (which corresponds to ``tau = 1`` up to a constant).
    """

    gamma: float
    tau: float = 1.0
    amplitude: float = 1.0
    mean: float = 0.0
    exact_spectrum: bool = False

    def __post_init__(self) -> None:
        if not np.isfinite(self.gamma) or self.gamma < 0:
            raise ValueError(f"gamma must be finite and >= 0, got {self.gamma}")
        if not np.isfinite(self.tau) or self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if not np.isfinite(self.amplitude) or self.amplitude <= 0:
            raise ValueError(f"amplitude must be positive, got {self.amplitude}")
        if not np.isfinite(self.mean):
            raise ValueError("mean must be finite")

    def require_lipschitz(self) -> None:
        """Reject parameters whose 1D samples are not Lipschitz (gamma <= 1)."""
        if self.gamma <= 1:
            raise ValueError(
                f"boundary fields require gamma > 1 for Lipschitz samples, got {self.gamma}"
            )


def kl_weight(params: MaternParams, k) -> np.ndarray | float:
    """Weight of mode ``k`` in the 1D expansion: ``amplitude * k**-gamma``.

    With ``params.exact_spectrum`` the weight is
    ``amplitude * (tau^2 + k^2)**(-gamma/2)``.  ``k`` may be a positive
    integer or an array of them.
    """
    k_arr = np.asarray(k)
    if np.any(k_arr < 1):
        raise ValueError("mode index k must be >= 1")
    if params.exact_spectrum:
        w = params.amplitude * (params.tau**2 + k_arr.astype(float) ** 2) ** (-params.gamma / 2)
    else:
        w = params.amplitude * k_arr.astype(float) ** (-params.gamma)
    return float(w) if np.ndim(k) == 0 else w


@dataclass(frozen=True)
class BoundaryCoeffs:
    """Truncated KL coefficients of a 1D periodic field.

    ``coeffs`` has shape ``(n_kl, 2)``: column 0 holds the sine
    coefficients, column 1 the cosine coefficients, row ``k-1`` mode ``k``.
    """

    coeffs: np.ndarray

    def __post_init__(self) -> None:
        arr = np.array(self.coeffs, dtype=float)
        if arr.ndim != 2 or arr.shape[1] != 2 or arr.shape[0] < 1:
            raise ValueError(f"coeffs must have shape (n_kl, 2), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("coefficients must be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "coeffs", arr)

    @property
    def n_kl(self) -> int:
        return self.coeffs.shape[0]


def sample_boundary_coeffs(params: MaternParams, n_kl: int, rng: np.random.Generator) -> BoundaryCoeffs:
    """Draw ``n_kl`` independent standard-normal coefficient pairs.

    No mode weighting is applied at sampling time; weights enter at
    evaluation via :func:`kl_weight`.
    """
    if n_kl < 1:
        raise ValueError(f"n_kl must be >= 1, got {n_kl}")
    return BoundaryCoeffs(rng.standard_normal((n_kl, 2)))


def _mode_series(xi_sin: np.ndarray, xi_cos: np.ndarray, weights: np.ndarray, angles: np.ndarray) -> np.ndarray:
    """Accumulate ``sum_k w_k (xi1_k sin(k a) + xi2_k cos(k a))``.

    Uses the angle-addition recurrence so memory stays O(len(angles))
    regardless of the number of modes.
    """
    s1 = np.sin(angles)
    c1 = np.cos(angles)
    sk = s1.copy()
    ck = c1.copy()
    acc = np.zeros_like(s1)
    n = len(weights)
    for k in range(n):
        acc += weights[k] * (xi_sin[k] * sk + xi_cos[k] * ck)
        if k + 1 < n:
            sk, ck = sk * c1 + ck * s1, ck * c1 - sk * s1
    return acc


def evaluate_boundary_field(coeffs: BoundaryCoeffs, params: MaternParams, angles) -> np.ndarray:
    """Evaluate the 1D field ``m + sum_k w_k (xi1_k sin(k a) + xi2_k cos(k a))``.

    The result is 2*pi-periodic up to floating rounding.
    """
    params.require_lipschitz()
    a = np.asarray(angles, dtype=float)
    if not np.all(np.isfinite(a)):
        raise ValueError("angles must be finite")
    w = kl_weight(params, np.arange(1, coeffs.n_kl + 1))
    out = params.mean + _mode_series(coeffs.coeffs[:, 0], coeffs.coeffs[:, 1], np.asarray(w), a)
    return out


def boundary_prior_variance(params: MaternParams, n_kl: int) -> float:
    """Pointwise prior variance of the truncated 1D field: ``sum_k w_k^2``."""
    w = np.asarray(kl_weight(params, np.arange(1, n_kl + 1)))
    return float(np.sum(w**2))


@dataclass(frozen=True)
class Grid2D:
    """Uniform pixel grid; ``origin`` is the center of pixel (0, 0)."""

    nx: int
    ny: int
    spacing: float
    origin: tuple[float, float]

    def __post_init__(self) -> None:
        if self.nx < 1 or self.ny < 1:
            raise ValueError("grid dimensions must be positive")
        if not np.isfinite(self.spacing) or self.spacing <= 0:
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @classmethod
    def centered(cls, n: int, halfwidth: float = 1.0) -> "Grid2D":
        """Square n-by-n grid whose pixel edges exactly tile [-hw, hw]^2."""
        spacing = 2.0 * halfwidth / n
        o = -halfwidth + spacing / 2.0
        return cls(n, n, spacing, (o, o))

    def x_centers(self) -> np.ndarray:
        return self.origin[0] + self.spacing * np.arange(self.nx)

    def y_centers(self) -> np.ndarray:
        return self.origin[1] + self.spacing * np.arange(self.ny)

    def pixel_center(self, ix: int, iy: int) -> tuple[float, float]:
        return (self.origin[0] + ix * self.spacing, self.origin[1] + iy * self.spacing)


@dataclass(frozen=True)
class Field2D:
    """Scalar field sampled on a :class:`Grid2D`; ``values[ix, iy]``."""

    grid: Grid2D
    values: np.ndarray

    def __post_init__(self) -> None:
        arr = np.array(self.values, dtype=float)
        if arr.shape != (self.grid.nx, self.grid.ny):
            raise ValueError(
                f"values shape {arr.shape} does not match grid ({self.grid.nx}, {self.grid.ny})"
            )
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def nx(self) -> int:
        return self.grid.nx

    @property
    def ny(self) -> int:
        return self.grid.ny

    @property
    def spacing(self) -> float:
        return self.grid.spacing

    @property
    def origin(self) -> tuple[float, float]:
        return self.grid.origin


def bilinear(field: Field2D, points: np.ndarray) -> np.ndarray:
    """Bilinear interpolation of ``field`` at ``points`` (shape (..., 2)).

    Points beyond the outermost pixel centers are clamped to the edge value.
    """
    pts = np.asarray(points, dtype=float)
    return bilinear_xy(field, np.ascontiguousarray(pts[..., 0]), np.ascontiguousarray(pts[..., 1]))


def bilinear_xy(field: Field2D, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Bilinear interpolation with separate coordinate arrays."""
    gx = (x - field.origin[0]) / field.spacing
    gy = (y - field.origin[1]) / field.spacing
    ix0 = np.clip(np.floor(gx).astype(np.int64), 0, field.nx - 2) if field.nx > 1 else np.zeros_like(gx, dtype=np.int64)
    iy0 = np.clip(np.floor(gy).astype(np.int64), 0, field.ny - 2) if field.ny > 1 else np.zeros_like(gy, dtype=np.int64)
    fx = np.clip(gx - ix0, 0.0, 1.0)
    fy = np.clip(gy - iy0, 0.0, 1.0)
    v = field.values
    ix1 = np.minimum(ix0 + 1, field.nx - 1)
    iy1 = np.minimum(iy0 + 1, field.ny - 1)
    return (
        v[ix0, iy0] * (1 - fx) * (1 - fy)
        + v[ix1, iy0] * fx * (1 - fy)
        + v[ix0, iy1] * (1 - fx) * fy
        + v[ix1, iy1] * fx * fy
    )


class SpectralField2D:
    """FFT sampler for stationary fields with spectral density ``(tau^2+|w|^2)^-gamma``.

    The box is periodic; angular wavenumbers are ``w = 2*pi*fftfreq(n, spacing)``.
    A draw is ``amplitude * ifft2(sqrt(S) * fft2(white))`` with real white
    noise, which makes the pointwise (zero-lag) variance exactly
    ``amplitude^2 * mean(S)`` over retained modes - the discrete Parseval sum.

    ``n_kl`` optionally truncates the spectrum to the modes with the
    largest density (the lowest frequencies); ties at the cutoff are all
    retained so the mask stays symmetric and draws stay real.
    """

    def __init__(self, params: MaternParams, grid: Grid2D, n_kl: int | None = None):
        if grid.nx < 2 or grid.ny < 2 or grid.nx % 2 or grid.ny % 2:
            raise ValueError(f"grid dimensions must be even and >= 2, got {grid.nx}x{grid.ny}")
        self.params = params
        self.grid = grid
        wx = 2.0 * np.pi * np.fft.fftfreq(grid.nx, d=grid.spacing)
        wy = 2.0 * np.pi * np.fft.fftfreq(grid.ny, d=grid.spacing)
        w2 = wx[:, None] ** 2 + wy[None, :] ** 2
        density = (params.tau**2 + w2) ** (-params.gamma)
        if n_kl is not None:
            if n_kl < 1:
                raise ValueError("n_kl must be >= 1")
            flat = np.sort(density.ravel())[::-1]
            cutoff = flat[min(n_kl, flat.size) - 1]
            density = np.where(density >= cutoff, density, 0.0)
        self._sqrt_density = np.sqrt(density)
        self.stationary_variance = float(params.amplitude**2 * density.mean())

    @property
    def coeff_shape(self) -> tuple[int, int]:
        return (self.grid.nx, self.grid.ny)

    def transform(self, white: np.ndarray) -> np.ndarray:
        """Map a real white-noise array to a correlated field (linear, exact)."""
        spec = self._sqrt_density * np.fft.fft2(white)
        return self.params.amplitude * np.fft.ifft2(spec).real

    def sample(self, rng: np.random.Generator) -> Field2D:
        return Field2D(self.grid, self.transform(rng.standard_normal(self.coeff_shape)))


def sample_field_2d(
    params: MaternParams,
    grid: Grid2D,
    rng: np.random.Generator,
    n_kl: int | None = None,
) -> Field2D:
    """One zero-mean draw of the 2D Whittle-Matern field on ``grid``.

    Identical seeds give bit-identical draws.  See :class:`SpectralField2D`
    for the normalization convention.
    """
    return SpectralField2D(params, grid, n_kl=n_kl).sample(rng)

"""Closed-form divergences, Poisson rate matching and sparse edge samplers.

Every function accepts Python floats, numpy arrays or :class:`~ilora.autodiff.Tensor`
values. Tensor inputs stay on the active tape, so the same code path serves the
loss and the numerical checks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

from . import autodiff as ad

TAIL_CLAMP = 1e-12
POSITIVE_FLOOR = 1e-6


@dataclass(frozen=True)
class GaussianParams:
    mean: float
    std: float

    def __post_init__(self):
        if not self.std > 0:
            raise ValueError(f"stddev must be positive, got {self.std}")


@dataclass(frozen=True)
class PoissonRate:
    rate: float

    def __post_init__(self):
        if not self.rate > 0:
            raise ValueError(f"Poisson rate must be positive, got {self.rate}")


@dataclass(frozen=True)
class LaplaceParams:
    scale: float
    loc: float = 0.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"Laplace scale must be positive, got {self.scale}")


def _values(x) -> np.ndarray:
    return x.data if isinstance(x, ad.Tensor) else np.asarray(x, dtype=np.float64)


def _require_positive(x, what: str) -> None:
    v = _values(x)
    if not np.all(v > 0):
        raise ValueError(f"{what} must be positive")


def _require_finite(x, what: str) -> None:
    if not np.all(np.isfinite(_values(x))):
        raise ValueError(f"{what} must be finite")


def match_poisson_rate(u, delta):
    """Rate ``m`` minimizing KL(N(m, m) || N(u, delta^2)) over m > 0.

    It is the positive root of ``2 m^2 + (1 - 2u) m - delta^2 = 0``. The
    rationalized form is used when ``2u - 1 < 0`` to avoid cancellation.
    """
    _require_positive(delta, "delta")
    t = 2.0 * u - 1.0
    d2 = delta * delta
    root = ad.sqrt(t * t + 8.0 * d2)
    neg = _values(t) < 0
    if isinstance(t, ad.Tensor) or isinstance(root, ad.Tensor):
        # the unused side of where() must stay finite too
        denom = ad.where(neg, root - t, 1.0)
        upper = (t + root) / 4.0
        lower = 2.0 * d2 / denom
        return ad.where(neg, lower, upper)
    denom = np.where(neg, root - t, 1.0)
    return np.where(neg, 2.0 * d2 / denom, (t + root) / 4.0)[()]


def match_poisson(g: GaussianParams) -> PoissonRate:
    return PoissonRate(float(match_poisson_rate(g.mean, g.std)))


def rate_quadratic_residual(m, u, delta):
    return 2.0 * m * m + (1.0 - 2.0 * u) * m - delta * delta


def kl_gaussian(mu0, sigma0, mu1, sigma1):
    """KL(N(mu0, sigma0^2) || N(mu1, sigma1^2))."""
    _require_positive(sigma0, "sigma0")
    _require_positive(sigma1, "sigma1")
    v0 = sigma0 * sigma0
    v1 = sigma1 * sigma1
    diff = mu0 - mu1
    return 0.5 * (ad.log(v1 / v0) + (v0 + diff * diff) / v1 - 1.0)


def kl_poisson(m, m0):
    """KL(Pois(m) || Pois(m0)) = m0 - m + m log(m / m0)."""
    _require_positive(m, "rate m")
    _require_positive(m0, "prior rate m0")
    return m0 - m + m * ad.log(m / m0)


def kl_laplace(b, b0):
    """KL(Laplace(0, b) || Laplace(0, b0)) = log(b0 / b) + b / b0 - 1."""
    _require_positive(b, "scale b")
    _require_positive(b0, "prior scale b0")
    return ad.log(b0 / b) + b / b0 - 1.0


def erf_cdf(z):
    """Standard normal CDF."""
    _require_finite(z, "z")
    return special.ndtr(_values(z))[()]


def _normal_pdf(z):
    return np.exp(-0.5 * z * z) / np.sqrt(2.0 * np.pi)


def laplace_inverse_cdf(p, scale=1.0, loc=0.0):
    """Quantile function of Laplace(loc, scale)."""
    p = np.asarray(p, dtype=np.float64)
    if np.any((p <= 0) | (p >= 1)):
        raise ValueError("probability must lie in the open interval (0, 1)")
    _require_positive(scale, "scale")
    c = p - 0.5
    return (loc - scale * np.sign(c) * np.log1p(-2.0 * np.abs(c)))[()]


def laplace_cdf(x, scale=1.0, loc=0.0):
    x = (np.asarray(x, dtype=np.float64) - loc) / scale
    return np.where(x < 0, 0.5 * np.exp(x), 1.0 - 0.5 * np.exp(-x))[()]


def _unit_quantile_of_normal(z: np.ndarray) -> np.ndarray:
    # Laplace(0,1) quantile of Phi(z), evaluated through the smaller tail mass
    # so that |z| up to the clamp stays accurate.
    tail = np.maximum(special.ndtr(-np.abs(z)), TAIL_CLAMP)
    return -np.sign(z) * np.log(2.0 * tail)


def _unit_quantile_slope(z: np.ndarray, value: np.ndarray) -> np.ndarray:
    tail = special.ndtr(-np.abs(z))
    return np.where(tail > TAIL_CLAMP, _normal_pdf(z) / np.maximum(tail, TAIL_CLAMP), 0.0)


def normal_to_unit_laplace(z):
    """F_Laplace(0,1)^{-1}(Phi(z)) with the Phi tail clamped at 1e-12.

    Differentiable in ``z``; the derivative is zero inside the clamped tails.
    """
    zv = _values(z)
    ad._note_branch(special.ndtr(-np.abs(zv)) > TAIL_CLAMP)
    return ad.elementwise(z, _unit_quantile_of_normal, _unit_quantile_slope, "npn_laplace")


def npn_edge_sample(u, delta, scale, eps, loc=0.0):
    """Gaussian proxy draw pushed through Phi and the Laplace quantile.

    ``z = u + delta * eps``; the result is ``loc + scale * F^{-1}(Phi(z))``.
    """
    _require_positive(delta, "delta")
    _require_positive(scale, "scale")
    _require_finite(eps, "eps")
    z = u + delta * eps
    return loc + scale * normal_to_unit_laplace(z)


def rayleigh_mixture_sample(scale, uniforms, normals):
    """Laplace(0, scale) draws as N(0, sigma^2) with sigma ~ Rayleigh(scale).

    ``uniforms`` in (0, 1] drive the Rayleigh inverse CDF, ``normals`` are N(0, 1).
    """
    _require_positive(scale, "scale")
    u = np.asarray(uniforms, dtype=np.float64)
    if np.any((u <= 0) | (u > 1)):
        raise ValueError("uniform draws must lie in (0, 1]")
    sigma = scale * np.sqrt(-2.0 * np.log(u))
    return (sigma * np.asarray(normals, dtype=np.float64))[()]


def sample_rayleigh_mixture(scale: float, n: int, rng: np.random.Generator) -> np.ndarray:
    u = 1.0 - rng.random(n)
    return rayleigh_mixture_sample(scale, u, rng.standard_normal(n))


def sample_npn(u: float, delta: float, scale: float, n: int, rng: np.random.Generator) -> np.ndarray:
    return npn_edge_sample(u, delta, scale, rng.standard_normal(n))


def positive(raw, floor: float = POSITIVE_FLOOR):
    """softplus(raw) + floor, the map used for every positive network output."""
    return ad.softplus(raw) + floor

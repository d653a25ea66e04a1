"""Input random vector: independent marginals with sampling, densities, quantiles.

Supported families: uniform, normal, truncated normal. A variable may be declared
log-space, in which case the distribution governs ln of the physical quantity and
``sample`` returns the exponentiated physical value. All other operations
(``log_density``, ``cdf``, ``quantile``, supports, moments) work on the underlying
(governed) coordinate; the MCMC chains and the correction surrogate live there too.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr, ndtri

__all__ = [
    "RandomVariable",
    "ParameterSpace",
    "uniform",
    "normal",
    "truncated_normal",
    "sample",
    "log_density",
    "quantile",
]

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class RandomVariable:
    """One marginal of the input vector.

    Families and their parameters:
      uniform           -- lower < upper
      normal            -- mean, std > 0
      truncated_normal  -- mean, std > 0 of the parent normal, lower < upper bounds

    When ``log_space`` is true the distribution governs ln(physical value);
    ``sample`` exponentiates on the way out and everything else stays on the
    underlying coordinate.
    """

    name: str
    family: str
    mean: float = 0.0
    std: float = 1.0
    lower: float = -math.inf
    upper: float = math.inf
    log_space: bool = False

    def __post_init__(self) -> None:
        if self.family not in ("uniform", "normal", "truncated_normal"):
            raise ValueError(f"unknown family {self.family!r}")
        if self.family == "uniform":
            if not (self.lower < self.upper):
                raise ValueError(f"{self.name}: uniform requires lower < upper")
            if not (math.isfinite(self.lower) and math.isfinite(self.upper)):
                raise ValueError(f"{self.name}: uniform bounds must be finite")
        elif self.family == "normal":
            if not (self.std > 0):
                raise ValueError(f"{self.name}: normal requires std > 0")
        else:
            if not (self.std > 0):
                raise ValueError(f"{self.name}: truncated_normal requires std > 0")
            if not (self.lower < self.upper):
                raise ValueError(f"{self.name}: truncated_normal requires lower < upper")
            if not (math.isfinite(self.lower) and math.isfinite(self.upper)):
                raise ValueError(f"{self.name}: truncation bounds must be finite")

    # -- support and moments on the underlying coordinate --------------------

    @property
    def support(self) -> tuple[float, float]:
        if self.family == "normal":
            return (-math.inf, math.inf)
        return (self.lower, self.upper)

    @property
    def bounded(self) -> bool:
        lo, hi = self.support
        return math.isfinite(lo) and math.isfinite(hi)

    def _trunc_z(self) -> tuple[float, float, float]:
        """Standardized truncation bounds and the normalization mass."""
        a = (self.lower - self.mean) / self.std
        b = (self.upper - self.mean) / self.std
        z = ndtr(b) - ndtr(a)
        return a, b, z

    def marginal_mean(self) -> float:
        if self.family == "uniform":
            return 0.5 * (self.lower + self.upper)
        if self.family == "normal":
            return self.mean
        a, b, z = self._trunc_z()
        phi_a = math.exp(-0.5 * a * a) / math.sqrt(2.0 * math.pi)
        phi_b = math.exp(-0.5 * b * b) / math.sqrt(2.0 * math.pi)
        return self.mean + self.std * (phi_a - phi_b) / z

    def marginal_std(self) -> float:
        if self.family == "uniform":
            return (self.upper - self.lower) / math.sqrt(12.0)
        if self.family == "normal":
            return self.std
        a, b, z = self._trunc_z()
        phi_a = math.exp(-0.5 * a * a) / math.sqrt(2.0 * math.pi)
        phi_b = math.exp(-0.5 * b * b) / math.sqrt(2.0 * math.pi)
        m1 = (phi_a - phi_b) / z
        var = 1.0 + (a * phi_a - b * phi_b) / z - m1 * m1
        return self.std * math.sqrt(var)

    # -- distribution functions ----------------------------------------------

    def log_density(self, x: float) -> float:
        """Log density at underlying coordinate x; -inf outside the support."""
        if self.family == "uniform":
            if self.lower <= x <= self.upper:
                return -math.log(self.upper - self.lower)
            return -math.inf
        if self.family == "normal":
            u = (x - self.mean) / self.std
            return -0.5 * u * u - math.log(self.std) - 0.5 * _LOG_2PI
        if not (self.lower <= x <= self.upper):
            return -math.inf
        _, _, z = self._trunc_z()
        u = (x - self.mean) / self.std
        return -0.5 * u * u - math.log(self.std) - 0.5 * _LOG_2PI - math.log(z)

    def cdf(self, x: float) -> float:
        if self.family == "uniform":
            if x <= self.lower:
                return 0.0
            if x >= self.upper:
                return 1.0
            return (x - self.lower) / (self.upper - self.lower)
        if self.family == "normal":
            return float(ndtr((x - self.mean) / self.std))
        a, _, z = self._trunc_z()
        if x <= self.lower:
            return 0.0
        if x >= self.upper:
            return 1.0
        return float((ndtr((x - self.mean) / self.std) - ndtr(a)) / z)

    def quantile(self, p: float) -> float:
        """Inverse CDF on the underlying coordinate for p in (0, 1)."""
        if not (0.0 < p < 1.0):
            raise ValueError(f"quantile probability must lie in (0, 1), got {p}")
        if self.family == "uniform":
            return self.lower + p * (self.upper - self.lower)
        if self.family == "normal":
            return self.mean + self.std * float(ndtri(p))
        a, _, z = self._trunc_z()
        q = self.mean + self.std * float(ndtri(ndtr(a) + p * z))
        # The composition can overshoot the bounds by an ulp for extreme p.
        return min(max(q, self.lower), self.upper)

    # -- sampling -------------------------------------------------------------

    def sample_underlying(self, rng: np.random.Generator, size: int | None = None):
        """Draw from the underlying distribution (no log-space exponentiation)."""
        if self.family == "uniform":
            return rng.uniform(self.lower, self.upper, size=size)
        if self.family == "normal":
            return rng.normal(self.mean, self.std, size=size)
        # Inverse-CDF sampling stays exact under tight truncation, where
        # rejection from the parent normal would discard most draws.
        u = rng.uniform(0.0, 1.0, size=size)
        a, _, z = self._trunc_z()
        q = self.mean + self.std * ndtri(ndtr(a) + u * z)
        return np.clip(q, self.lower, self.upper)

    def sample(self, rng: np.random.Generator, size: int | None = None):
        """Draw a physical value (exponentiated when log_space)."""
        x = self.sample_underlying(rng, size=size)
        return np.exp(x) if self.log_space else x

    def to_physical(self, x):
        return np.exp(x) if self.log_space else x


def uniform(name: str, lower: float, upper: float, log_space: bool = False) -> RandomVariable:
    return RandomVariable(name, "uniform", lower=lower, upper=upper, log_space=log_space)


def normal(name: str, mean: float, std: float, log_space: bool = False) -> RandomVariable:
    return RandomVariable(name, "normal", mean=mean, std=std, log_space=log_space)


def truncated_normal(
    name: str,
    mean: float,
    std: float,
    lower: float,
    upper: float,
    log_space: bool = False,
) -> RandomVariable:
    return RandomVariable(
        name, "truncated_normal", mean=mean, std=std, lower=lower, upper=upper, log_space=log_space
    )


# Functional forms mirroring the per-variable methods; the engine uses these.


def sample(rv: RandomVariable, rng: np.random.Generator) -> float:
    return float(rv.sample(rng))


def log_density(rv: RandomVariable, x: float) -> float:
    return rv.log_density(x)


def quantile(rv: RandomVariable, p: float) -> float:
    return rv.quantile(p)


@dataclass(frozen=True)
class ParameterSpace:
    """Ordered collection of independent marginals with HF/LF membership.

    ``hf_indices`` and ``lf_indices`` select the sub-vectors each model consumes;
    together they must cover every variable (the models may share inputs, and for
    the analytic benchmarks both cover everything).
    """

    variables: tuple[RandomVariable, ...]
    hf_indices: tuple[int, ...] = ()
    lf_indices: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if not self.variables:
            raise ValueError("parameter space needs at least one variable")
        names = [v.name for v in self.variables]
        if len(set(names)) != len(names):
            raise ValueError("variable names must be unique")
        n = len(self.variables)
        hf = tuple(self.hf_indices) if self.hf_indices else tuple(range(n))
        lf = tuple(self.lf_indices) if self.lf_indices else tuple(range(n))
        for idx in (*hf, *lf):
            if not (0 <= idx < n):
                raise ValueError(f"variable index {idx} out of range")
        if set(hf) | set(lf) != set(range(n)):
            raise ValueError("hf_indices and lf_indices together must cover all variables")
        object.__setattr__(self, "hf_indices", hf)
        object.__setattr__(self, "lf_indices", lf)

    @property
    def dim(self) -> int:
        return len(self.variables)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(v.name for v in self.variables)

    @property
    def hf_names(self) -> tuple[str, ...]:
        return tuple(self.variables[i].name for i in self.hf_indices)

    @property
    def lf_names(self) -> tuple[str, ...]:
        return tuple(self.variables[i].name for i in self.lf_indices)

    def sample_underlying(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """n x dim matrix of underlying-coordinate draws."""
        cols = [v.sample_underlying(rng, size=n) for v in self.variables]
        return np.column_stack(cols)

    def to_physical(self, z: np.ndarray) -> np.ndarray:
        """Map underlying coordinates to physical values (elementwise exp where log-space)."""
        z = np.asarray(z, dtype=float)
        out = z.copy()
        for j, v in enumerate(self.variables):
            if v.log_space:
                out[..., j] = np.exp(z[..., j])
        return out

    def to_underlying(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = x.copy()
        for j, v in enumerate(self.variables):
            if v.log_space:
                out[..., j] = np.log(x[..., j])
        return out

    def named_params(self, x_phys: np.ndarray, indices: tuple[int, ...]) -> dict[str, float]:
        """Named parameter assignment for the selected sub-vector (physical units)."""
        return {self.variables[i].name: float(x_phys[i]) for i in indices}

    def marginal_stds(self) -> np.ndarray:
        return np.array([v.marginal_std() for v in self.variables])

    def supports(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.array([v.support[0] for v in self.variables])
        hi = np.array([v.support[1] for v in self.variables])
        return lo, hi

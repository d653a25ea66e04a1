"""Probability and COV estimators over per-sample sign-probability records.

Each sample contributes a record 𝒫: the exact failure indicator when the
expensive model evaluated it, otherwise the probability that the corrected
cheap prediction has the correct sign at the level threshold. Level
probabilities are means of 𝒫; their COVs carry a chain-autocorrelation
inflation on conditional levels, estimated per chain with the lag-zero
variance pinned to P(1-P).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ProbabilityRecord",
    "EstimateReport",
    "level_probability",
    "chain_autocovariance",
    "chain_autocorrelation",
    "chain_gamma",
    "level_cov",
    "total_cov",
    "pf_estimate",
]


@dataclass(frozen=True)
class ProbabilityRecord:
    """One sample's contribution: 𝒫, fidelity flag, and its chain position."""

    value: float
    is_hf: bool
    chain: int
    step: int
    level: int

    def __post_init__(self) -> None:
        if not (0.0 <= self.value <= 1.0):
            raise ValueError(f"record value {self.value} outside [0, 1]")
        if self.is_hf and self.value not in (0.0, 1.0):
            raise ValueError("records from expensive evaluations must be exact indicators")


def level_probability(records) -> float:
    """Mean of the 𝒫 values of one level."""
    if not records:
        raise ValueError("level has no records")
    return float(np.mean([r.value for r in records]))


def _chain_matrix(records) -> np.ndarray:
    """records -> (n_chains, chain_length) matrix ordered by (chain, step)."""
    chains = {}
    for r in records:
        chains.setdefault(r.chain, []).append(r)
    lengths = {len(v) for v in chains.values()}
    if len(lengths) != 1:
        raise ValueError("chains have unequal lengths")
    mat = np.empty((len(chains), lengths.pop()))
    for row, cid in enumerate(sorted(chains)):
        for r in sorted(chains[cid], key=lambda rec: rec.step):
            mat[row, r.step - 1] = r.value
    return mat


def chain_autocovariance(records, lag: int, p_hat: float | None = None) -> float:
    """R̂(lag): cross-moment over chains and admissible offsets, minus P̂².

    The lag-zero value is substituted exactly as P̂(1-P̂) rather than the
    empirical second moment of 𝒫 (the records are probabilities, not
    indicators, and the estimator's variance anchor is the Bernoulli one).
    """
    mat = _chain_matrix(records)
    n_chains, k_max = mat.shape
    if not (0 <= lag <= k_max - 1):
        raise ValueError(f"lag {lag} outside [0, {k_max - 1}]")
    if p_hat is None:
        p_hat = float(mat.mean())
    if lag == 0:
        return p_hat * (1.0 - p_hat)
    cross = float((mat[:, : k_max - lag] * mat[:, lag:]).mean())
    return cross - p_hat * p_hat


def chain_autocorrelation(records, lag: int, p_hat: float | None = None) -> float:
    r0 = chain_autocovariance(records, 0, p_hat)
    if r0 == 0.0:
        return 0.0
    return chain_autocovariance(records, lag, p_hat) / r0


def chain_gamma(records, p_hat: float | None = None, literal_form: bool = False) -> float:
    """Autocorrelation inflation γ̂ for one conditional level.

    Standard form: γ̂ = 2 Σ_{k=1}^{K-1} (1 - k·Nc/N) ρ̂(k), which vanishes for
    uncorrelated chains. ``literal_form`` instead applies the weight to the
    sum as 2 Σ (1 - (k·Nc/N)·ρ̂(k)); it does not vanish for uncorrelated
    chains and exists only for side-by-side comparison.
    """
    mat = _chain_matrix(records)
    k_max = mat.shape[1]
    if p_hat is None:
        p_hat = float(mat.mean())
    total = 0.0
    for k in range(1, k_max):
        rho = chain_autocorrelation(records, k, p_hat)
        w = k / k_max  # == k * n_chains / n_total
        total += (1.0 - w * rho) if literal_form else (1.0 - w) * rho
    return 2.0 * total


def level_cov(records, literal_form: bool = False):
    """(δ̂_s, γ̂_s) for one level's records.

    The first level is independent sampling, so its COV is the plain MC form
    and γ̂ = 0. Conditional levels inflate the MC COV by (1 + γ̂); the raw γ̂
    estimate is returned as-is (it can dip slightly negative on uncorrelated
    chains) but the inflation is floored at 1 so a correlated COV never
    undercuts the uncorrelated one. Degenerate levels (P̂ of 0 or 1) report an
    infinite COV instead of raising so failed runs still render a report.
    """
    if not records:
        raise ValueError("level has no records")
    p_hat = level_probability(records)
    n = len(records)
    if p_hat <= 0.0 or p_hat >= 1.0:
        return math.inf, 0.0
    level = records[0].level
    if level <= 1:
        return math.sqrt((1.0 - p_hat) / (p_hat * n)), 0.0
    gamma = chain_gamma(records, p_hat, literal_form=literal_form)
    inflation = 1.0 + max(gamma, 0.0)
    return math.sqrt((1.0 - p_hat) / (p_hat * n) * inflation), gamma


def total_cov(level_deltas) -> float:
    """Root-sum-square of level COVs; infinite if any level is degenerate."""
    deltas = list(level_deltas)
    if not deltas:
        raise ValueError("no levels")
    if any(math.isinf(d) for d in deltas):
        return math.inf
    return math.sqrt(sum(d * d for d in deltas))


def pf_estimate(p0: float, level_means, final_indicator_fraction: float):
    """(pf_indicator, pf_weighted).

    pf_indicator multiplies the nominal p0 per conditional split by the final
    level's indicator fraction; pf_weighted is the product of the per-level
    mean-𝒫 estimates.
    """
    means = [float(m) for m in level_means]
    if not means:
        raise ValueError("no levels")
    n_levels = len(means)
    pf_indicator = p0 ** (n_levels - 1) * float(final_indicator_fraction)
    pf_weighted = 1.0
    for m in means:
        pf_weighted *= m
    return pf_indicator, pf_weighted


@dataclass
class EstimateReport:
    """Everything a run reports: estimates, uncertainties, budgets, traces."""

    method: str
    pf_indicator: float
    pf_weighted: float
    level_probabilities: list
    level_covs: list
    level_gammas: list
    cov_total: float
    cov_total_uncorrelated: float
    hf_calls: int
    lf_calls: int
    hf_calls_initialization: int
    level_thresholds: list
    converged: bool
    n_levels: int
    p0: float
    n_per_level: int
    warnings: list = field(default_factory=list)

    def __post_init__(self) -> None:
        for name in ("pf_indicator", "pf_weighted"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} = {v} outside [0, 1]")

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "pf_indicator": self.pf_indicator,
            "pf_weighted": self.pf_weighted,
            "level_probabilities": list(self.level_probabilities),
            "level_covs": list(self.level_covs),
            "level_gammas": list(self.level_gammas),
            "cov_total": self.cov_total,
            "cov_total_uncorrelated": self.cov_total_uncorrelated,
            "hf_calls": self.hf_calls,
            "lf_calls": self.lf_calls,
            "hf_calls_initialization": self.hf_calls_initialization,
            "hf_calls_adaptive": self.hf_calls - self.hf_calls_initialization,
            "level_thresholds": list(self.level_thresholds),
            "converged": self.converged,
            "n_levels": self.n_levels,
            "p0": self.p0,
            "n_per_level": self.n_per_level,
            "warnings": list(self.warnings),
        }

"""Sampling engines that estimate small exceedance probabilities level by level.

Four methods share the machinery here:

MC         plain Monte Carlo on the expensive model
SS         subset simulation on the expensive model, with component-wise
           Metropolis chains between levels
MF_AK_MCS  single-level Monte Carlo that consults the corrected cheap model
           and only pays for the expensive one when the sign of the margin
           is in doubt at the fixed threshold
MF_AL_SS   the level-adaptive version of the same filter inside subset
           simulation, where intermediate levels compare against a running
           quantile instead of the fixed threshold

Internals work in exceedance orientation: responses are multiplied by a
direction sign so that failure always reads "output >= threshold". Reports
convert thresholds back to model units.

Reproducibility contract: one seed spawns three child streams (correction
initialization, level sampling, cheap-model training). The level stream is
consumed identically by SS and MF_AL_SS, so a perfect cheap model makes the
two methods walk the same sample path bit for bit.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from . import gp as gp_mod
from .distributions import ParameterSpace
from .estimators import EstimateReport, ProbabilityRecord, level_cov, level_probability, pf_estimate, total_cov
from .learning import (
    ACCEPT_LF,
    LearningConfig,
    QuantileTracker,
    decide_fidelity,
    u_value,
)
from .models import EvaluationError, MultifidelityModel

__all__ = [
    "MC",
    "SS",
    "MF_AK_MCS",
    "MF_AL_SS",
    "ProposalSettings",
    "RunConfig",
    "LevelState",
    "RngStreams",
    "rng_streams",
    "initialize_correction",
    "mmh_propose_accept",
    "run_first_level",
    "run_conditional_level",
    "run",
    "resume_run",
    "write_checkpoint",
    "config_from_dict",
]

MC = "MC"
SS = "SS"
MF_AK_MCS = "MF_AK_MCS"
MF_AL_SS = "MF_AL_SS"
_METHODS = (MC, SS, MF_AK_MCS, MF_AL_SS)

_CHECKPOINT_FORMAT = 1


@dataclass(frozen=True)
class ProposalSettings:
    """Random-walk widths for the component-wise Metropolis proposals.

    Each component's step size is its marginal standard deviation times
    ``scale``. Unbounded marginals take normal increments; bounded ones take
    a uniform window of half-width scale*std, folded back at the support
    edges so the proposal stays symmetric.
    """

    scale: float = 1.0

    def __post_init__(self) -> None:
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ValueError(f"proposal scale must be positive, got {self.scale}")


@dataclass(frozen=True)
class RunConfig:
    """Everything one estimation run needs besides the models.

    n_per_level includes the seeds on conditional levels: each of the
    n_chains chains stores its seed as step 1 and appends chain_length - 1
    Metropolis steps. n_chains derives as p0 * n_per_level unless overridden
    (an override below the seed count leaves the surplus seeds contributing
    to the threshold but not starting chains). fixed_levels pins the level
    count the way a fixed-depth study would; the default None lets the run
    stop at whichever level's quantile crosses the failure threshold.
    """

    n_per_level: int
    failure_threshold: float
    fail_direction: str = "above"
    p0: float = 0.1
    max_levels: int = 10
    n_chains: int | None = None
    n_init: int = 20
    method: str = MF_AL_SS
    learning: LearningConfig = field(default_factory=LearningConfig)
    proposal: ProposalSettings = field(default_factory=ProposalSettings)
    rng_seed: int = 0
    fixed_levels: int | None = None

    def __post_init__(self) -> None:
        if self.method not in _METHODS:
            raise ValueError(f"method must be one of {_METHODS}, got {self.method!r}")
        if not (0.0 < self.p0 < 1.0):
            raise ValueError(f"p0 must lie in (0, 1), got {self.p0}")
        if self.n_per_level < 1:
            raise ValueError("n_per_level must be positive")
        m = self.p0 * self.n_per_level
        if abs(m - round(m)) > 1e-9 or round(m) < 1:
            raise ValueError(
                f"p0 * n_per_level must be a positive integer, got {m}"
            )
        if self.n_chains is None:
            object.__setattr__(self, "n_chains", int(round(m)))
        if self.n_chains < 1 or self.n_chains > round(m):
            raise ValueError(
                f"n_chains must lie in [1, {int(round(m))}], got {self.n_chains}"
            )
        if self.n_per_level % self.n_chains != 0:
            raise ValueError(
                f"n_per_level must be a multiple of n_chains "
                f"({self.n_per_level} % {self.n_chains} != 0)"
            )
        if self.fail_direction not in ("above", "below"):
            raise ValueError(
                f"fail_direction must be 'above' or 'below', got {self.fail_direction!r}"
            )
        if self.max_levels < 1:
            raise ValueError("max_levels must be at least 1")
        if self.n_init < 2:
            raise ValueError("n_init must be at least 2")
        if self.fixed_levels is not None and not (1 <= self.fixed_levels <= self.max_levels):
            raise ValueError("fixed_levels must lie in [1, max_levels]")
        if not math.isfinite(self.failure_threshold):
            raise ValueError("failure_threshold must be finite")
        if not isinstance(self.rng_seed, int) or self.rng_seed < 0:
            raise ValueError("rng_seed must be a nonnegative integer")

    @property
    def seed_count(self) -> int:
        return int(round(self.p0 * self.n_per_level))

    @property
    def chain_length(self) -> int:
        return self.n_per_level // self.n_chains

    @property
    def sign(self) -> float:
        """Multiplier that turns model outputs into exceedance orientation."""
        return -1.0 if self.fail_direction == "below" else 1.0

    @property
    def threshold_exceedance(self) -> float:
        return self.sign * self.failure_threshold


@dataclass
class RngStreams:
    """The three child generators a run consumes, in a fixed order."""

    init: np.random.Generator
    levels: np.random.Generator
    lf_training: np.random.Generator


def rng_streams(seed: int) -> RngStreams:
    children = np.random.SeedSequence(seed).spawn(3)
    return RngStreams(*(np.random.Generator(np.random.PCG64(c)) for c in children))


# ---------------------------------------------------------------------------
# per-level state


@dataclass
class LevelState:
    """One level's samples, responses, and bookkeeping.

    Arrays are aligned by slot; on conditional levels slots are laid out
    chain-major with the seed at step 1. ``outputs`` and ``threshold`` are in
    exceedance orientation. ``is_exact`` marks slots whose stored response is
    known exactly (an expensive evaluation, or a corrected prediction whose
    uncertainty sat below the floor); their probability records are 0/1.
    ``sign_probs`` holds the per-slot probability-of-exceedance records,
    computed once the level's threshold is settled.
    """

    level: int
    samples: np.ndarray
    outputs: np.ndarray
    stds: np.ndarray
    is_hf: np.ndarray
    is_exact: np.ndarray
    chain_ids: np.ndarray
    steps: np.ndarray
    u_values: np.ndarray
    hf_cum: np.ndarray
    threshold: float
    is_final: bool
    sign_probs: np.ndarray | None = None
    seed_indices: np.ndarray | None = None
    f_lim: float = math.nan
    hf_calls_end: int = 0

    def records(self) -> list[ProbabilityRecord]:
        if self.sign_probs is None:
            raise ValueError("level records not attached yet")
        return [
            ProbabilityRecord(float(v), bool(h), int(c), int(k), self.level)
            for v, h, c, k in zip(
                self.sign_probs, self.is_hf, self.chain_ids, self.steps
            )
        ]

    def validate(self, config: RunConfig, prev_threshold: float | None = None) -> None:
        """Internal consistency checks; raises on violation."""
        n = self.outputs.size
        if n != config.n_per_level:
            raise ValueError(f"level holds {n} slots, expected {config.n_per_level}")
        if prev_threshold is not None and np.any(self.outputs < prev_threshold):
            raise ValueError("conditional level stores outputs below its entry bound")
        if self.sign_probs is not None:
            exact = self.is_exact
            vals = self.sign_probs[exact]
            if vals.size and not np.all((vals == 0.0) | (vals == 1.0)):
                raise ValueError("exact slots must carry indicator records")

    def to_dict(self) -> dict:
        return {
            "level": self.level,
            "samples": self.samples.tolist(),
            "outputs": self.outputs.tolist(),
            "stds": self.stds.tolist(),
            "is_hf": self.is_hf.astype(int).tolist(),
            "is_exact": self.is_exact.astype(int).tolist(),
            "chain_ids": self.chain_ids.tolist(),
            "steps": self.steps.tolist(),
            "u_values": self.u_values.tolist(),
            "hf_cum": self.hf_cum.tolist(),
            "threshold": self.threshold,
            "is_final": self.is_final,
            "sign_probs": None if self.sign_probs is None else self.sign_probs.tolist(),
            "seed_indices": None if self.seed_indices is None else self.seed_indices.tolist(),
            "f_lim": self.f_lim,
            "hf_calls_end": self.hf_calls_end,
        }

    @classmethod
    def from_dict(cls, blob: dict) -> "LevelState":
        return cls(
            level=int(blob["level"]),
            samples=np.asarray(blob["samples"], dtype=float),
            outputs=np.asarray(blob["outputs"], dtype=float),
            stds=np.asarray(blob["stds"], dtype=float),
            is_hf=np.asarray(blob["is_hf"], dtype=bool),
            is_exact=np.asarray(blob["is_exact"], dtype=bool),
            chain_ids=np.asarray(blob["chain_ids"], dtype=int),
            steps=np.asarray(blob["steps"], dtype=int),
            u_values=np.asarray(blob["u_values"], dtype=float),
            hf_cum=np.asarray(blob["hf_cum"], dtype=np.int64),
            threshold=float(blob["threshold"]),
            is_final=bool(blob["is_final"]),
            sign_probs=None
            if blob["sign_probs"] is None
            else np.asarray(blob["sign_probs"], dtype=float),
            seed_indices=None
            if blob["seed_indices"] is None
            else np.asarray(blob["seed_indices"], dtype=int),
            f_lim=float(blob["f_lim"]),
            hf_calls_end=int(blob["hf_calls_end"]),
        )


# ---------------------------------------------------------------------------
# proposals


class _ProposalPlan:
    """Precomputed per-component proposal data, built once per run."""

    __slots__ = ("variables", "stds", "lo", "hi", "bounded", "dim")

    @classmethod
    def from_space(cls, space: ParameterSpace, proposal: ProposalSettings) -> "_ProposalPlan":
        plan = cls()
        plan.variables = space.variables
        plan.stds = space.marginal_stds() * proposal.scale
        plan.lo, plan.hi = space.supports()
        plan.bounded = np.array([v.bounded for v in space.variables])
        plan.dim = space.dim
        return plan


def _mmh_step(current: np.ndarray, plan: _ProposalPlan, rng: np.random.Generator):
    """One component-wise Metropolis move. Returns (state, moved).

    All proposal increments are drawn first, then all acceptance uniforms,
    so the stream consumption per step is fixed at 2*dim draws.
    """
    dim = plan.dim
    cand = np.empty(dim)
    for d in range(dim):
        w = plan.stds[d]
        if plan.bounded[d]:
            x = current[d] + rng.uniform(-w, w)
            lo, hi = plan.lo[d], plan.hi[d]
            while x < lo or x > hi:
                x = 2.0 * lo - x if x < lo else 2.0 * hi - x
            cand[d] = x
        else:
            cand[d] = current[d] + w * rng.standard_normal()
    ln_u = np.log(rng.uniform(size=dim))
    out = current.copy()
    moved = False
    for d in range(dim):
        v = plan.variables[d]
        ln_a = v.log_density(float(cand[d])) - v.log_density(float(current[d]))
        # a zero-density candidate is always rejected, even against ln(0)
        if ln_a != -math.inf and ln_a >= ln_u[d]:
            out[d] = cand[d]
            moved = True
    return out, moved


def mmh_propose_accept(current, proposal: ProposalSettings, space: ParameterSpace, rng):
    """Propose and accept/reject each component independently.

    Proposals are symmetric (normal steps on unbounded marginals, reflected
    uniform windows on bounded ones), so the acceptance ratio reduces to the
    marginal density ratio of the target.
    """
    current = np.asarray(current, dtype=float)
    plan = _ProposalPlan.from_space(space, proposal)
    out, _ = _mmh_step(current, plan, rng)
    return out


# ---------------------------------------------------------------------------
# sample assessment

# (exceedance output, predictive std, expensive?, exact?, decision U)
_Triple = tuple


def _assess_hf(mf: MultifidelityModel, x: np.ndarray, sign: float) -> _Triple:
    g = sign * mf.hf_value(x)
    if not math.isfinite(g):
        raise EvaluationError(f"expensive model returned {g} at {x.tolist()}")
    return g, 0.0, True, True, math.nan


def _assess_mf(
    mf: MultifidelityModel,
    x: np.ndarray,
    config: RunConfig,
    tracker: QuantileTracker,
    pinned_final: bool,
) -> _Triple:
    learn = config.learning
    f_eng = config.threshold_exceedance
    mean_raw, sd = mf.evaluate_lf_corrected(x)
    g = config.sign * mean_raw
    if not (math.isfinite(g) and math.isfinite(sd)):
        raise EvaluationError(
            f"corrected prediction is not finite at {x.tolist()}: ({mean_raw}, {sd})"
        )
    t = tracker.threshold()
    if pinned_final:
        final_mode, level_thr = True, t
    elif math.isinf(t):
        # warm-up: no quantile reference yet, the cheap model stands
        final_mode, level_thr = False, math.inf
    elif t >= f_eng:
        # the running quantile crossed the true threshold mid-level, which
        # makes this the final level; the fixed threshold governs from here
        final_mode, level_thr = True, t
    else:
        final_mode, level_thr = False, t
    u = u_value(learn, g, sd, level_thr, f_eng, final_mode)
    if decide_fidelity(u, learn) == ACCEPT_LF:
        exact = sd < learn.sigma_floor
        return g, sd, False, exact, u
    g_hf = config.sign * mf.evaluate_hf_and_adapt(x)
    if not math.isfinite(g_hf):
        raise EvaluationError(f"expensive model returned {g_hf} at {x.tolist()}")
    return g_hf, 0.0, True, True, u


def _single_level(config: RunConfig) -> bool:
    return (
        config.method in (MC, MF_AK_MCS)
        or config.max_levels == 1
        or config.fixed_levels == 1
    )


# ---------------------------------------------------------------------------
# record computation


def _records_array(outputs, stds, is_exact, threshold, sigma_floor, membership):
    """Per-slot exceedance probabilities against a settled threshold.

    Exact slots become indicators: membership in the seed set when one is
    given (intermediate levels, where ties from repeated chain states would
    otherwise over- or under-fill the top fraction), or a direct threshold
    comparison (final level). Soft slots get the normal-cdf form from their
    stored mean and std.
    """
    n = outputs.size
    rec = np.empty(n)
    soft = ~is_exact
    if np.any(soft):
        d = outputs[soft] - threshold
        u = np.abs(d) / np.maximum(stds[soft], sigma_floor)
        phi = ndtr(u)
        rec[soft] = np.where(d >= 0.0, phi, 1.0 - phi)
    if membership is None:
        rec[is_exact] = (outputs[is_exact] >= threshold).astype(float)
    else:
        rec[is_exact] = membership[is_exact].astype(float)
    return rec


def _attach_records(lvl: LevelState, config: RunConfig, final_rules: bool) -> None:
    floor = config.learning.sigma_floor
    if final_rules:
        lvl.sign_probs = _records_array(
            lvl.outputs, lvl.stds, lvl.is_exact,
            config.threshold_exceedance, floor, None,
        )
        lvl.is_final = True
        lvl.seed_indices = None
        lvl.f_lim = math.nan
        return
    n = lvl.outputs.size
    m = config.seed_count
    order = np.argsort(-lvl.outputs, kind="stable")
    seed_idx = order[:m]
    sorted_thr = float(lvl.outputs[order[m - 1]])
    if sorted_thr != lvl.threshold:
        raise RuntimeError(
            f"running quantile {lvl.threshold!r} disagrees with the sorted "
            f"level threshold {sorted_thr!r}"
        )
    membership = np.zeros(n, dtype=bool)
    membership[seed_idx] = True
    lvl.sign_probs = _records_array(
        lvl.outputs, lvl.stds, lvl.is_exact, lvl.threshold, floor, membership
    )
    lvl.is_final = False
    lvl.seed_indices = seed_idx
    lvl.f_lim = sorted_thr


def _refinalize_final(lvl: LevelState, config: RunConfig) -> None:
    """Recompute a level's records against the true threshold.

    Used when the level cap ends a run that never crossed: the last level's
    contribution to the estimate is its mass beyond the true threshold, not
    beyond its own quantile.
    """
    _attach_records(lvl, config, final_rules=True)


# ---------------------------------------------------------------------------
# operations


def initialize_correction(mf: MultifidelityModel, space: ParameterSpace, n_init: int, rng):
    """Draw n_init design points and fit the correction on the differences."""
    if n_init < 2:
        raise ValueError("n_init must be at least 2")
    X = space.sample_underlying(rng, n_init)
    return mf.initialize_correction(X)


def run_first_level(mf: MultifidelityModel, space: ParameterSpace, config: RunConfig, rng) -> LevelState:
    """Independent sampling level: N draws from the input distribution.

    Multifidelity methods consult the corrected cheap model per sample and
    pay for the expensive one only when the sign of the margin is in doubt;
    MC and SS evaluate the expensive model on every draw. The level is final
    when the run is single-level by construction or when the realized
    quantile reaches the failure threshold.
    """
    n = config.n_per_level
    hf_only = config.method in (MC, SS)
    pinned = _single_level(config)
    f_eng = config.threshold_exceedance
    sgn = config.sign

    X = space.sample_underlying(rng, n)
    tracker = QuantileTracker(config.p0)
    out = np.empty(n)
    stds = np.zeros(n)
    is_hf = np.zeros(n, dtype=bool)
    exact = np.ones(n, dtype=bool)
    u_arr = np.full(n, math.nan)
    hf_cum = np.zeros(n, dtype=np.int64)

    for i in range(n):
        if hf_only:
            trip = _assess_hf(mf, X[i], sgn)
        else:
            trip = _assess_mf(mf, X[i], config, tracker, pinned)
        out[i], stds[i], is_hf[i], exact[i], u_arr[i] = trip
        tracker.insert(float(out[i]))
        hf_cum[i] = mf.hf.call_count

    realized = tracker.threshold()
    lvl = LevelState(
        level=1,
        samples=X,
        outputs=out,
        stds=stds,
        is_hf=is_hf,
        is_exact=exact,
        chain_ids=np.zeros(n, dtype=int),
        steps=np.arange(1, n + 1),
        u_values=u_arr,
        hf_cum=hf_cum,
        threshold=realized,
        is_final=False,
        hf_calls_end=mf.hf.call_count,
    )
    _attach_records(lvl, config, final_rules=pinned or realized >= f_eng)
    return lvl


def run_conditional_level(
    mf: MultifidelityModel,
    space: ParameterSpace,
    config: RunConfig,
    prev: LevelState,
    rng,
    plan: _ProposalPlan | None = None,
) -> LevelState:
    """One Metropolis level conditioned on exceeding the previous bound.

    Each chain starts at its seed (stored as step 1) and advances with
    component-wise moves; a candidate whose response falls below the entry
    bound repeats the previous chain state. A move where every component was
    rejected skips model evaluation entirely, the stored state cannot have
    changed. The running quantile is primed with the chain seeds.
    """
    if config.method in (MC, MF_AK_MCS):
        raise ValueError(f"{config.method} is single-level and has no conditional levels")
    if prev.is_final:
        raise ValueError("previous level already reached the failure threshold")
    if prev.seed_indices is None or len(prev.seed_indices) == 0:
        raise ValueError("previous level carries no seeds")

    s = prev.level + 1
    hf_only = config.method == SS
    pinned = config.fixed_levels == s
    if plan is None:
        plan = _ProposalPlan.from_space(space, config.proposal)
    n = config.n_per_level
    n_c = config.n_chains
    k_max = config.chain_length
    f_eng = config.threshold_exceedance
    sgn = config.sign

    starters = prev.seed_indices[:n_c]
    f_lim = float(np.min(prev.outputs[prev.seed_indices]))
    if f_lim != prev.f_lim:
        raise RuntimeError(
            f"seed minimum {f_lim!r} disagrees with the recorded bound {prev.f_lim!r}"
        )

    tracker = QuantileTracker(config.p0)
    for idx in starters:
        tracker.insert(float(prev.outputs[idx]))

    samples = np.empty((n, space.dim))
    out = np.empty(n)
    stds = np.zeros(n)
    is_hf = np.zeros(n, dtype=bool)
    exact = np.ones(n, dtype=bool)
    u_arr = np.full(n, math.nan)
    hf_cum = np.zeros(n, dtype=np.int64)
    chain_ids = np.empty(n, dtype=int)
    steps = np.empty(n, dtype=int)

    pos = 0
    for ci in range(n_c):
        si = int(starters[ci])
        cur_x = prev.samples[si].copy()
        cur = (
            float(prev.outputs[si]),
            float(prev.stds[si]),
            bool(prev.is_hf[si]),
            bool(prev.is_exact[si]),
            float(prev.u_values[si]),
        )
        # the seed itself is the chain's first stored sample; its output is
        # already in the tracker from the priming pass
        samples[pos] = cur_x
        out[pos], stds[pos], is_hf[pos], exact[pos], u_arr[pos] = cur
        chain_ids[pos] = ci + 1
        steps[pos] = 1
        hf_cum[pos] = mf.hf.call_count
        pos += 1
        for k in range(2, k_max + 1):
            cand_x, moved = _mmh_step(cur_x, plan, rng)
            if moved:
                if hf_only:
                    trip = _assess_hf(mf, cand_x, sgn)
                else:
                    trip = _assess_mf(mf, cand_x, config, tracker, pinned)
                if trip[0] >= f_lim:
                    cur_x = cand_x
                    cur = trip
            samples[pos] = cur_x
            out[pos], stds[pos], is_hf[pos], exact[pos], u_arr[pos] = cur
            chain_ids[pos] = ci + 1
            steps[pos] = k
            tracker.insert(cur[0])
            hf_cum[pos] = mf.hf.call_count
            pos += 1

    realized = tracker.threshold()
    lvl = LevelState(
        level=s,
        samples=samples,
        outputs=out,
        stds=stds,
        is_hf=is_hf,
        is_exact=exact,
        chain_ids=chain_ids,
        steps=steps,
        u_values=u_arr,
        hf_cum=hf_cum,
        threshold=realized,
        is_final=False,
        hf_calls_end=mf.hf.call_count,
    )
    lvl.validate(config, prev_threshold=f_lim)
    _attach_records(lvl, config, final_rules=pinned or realized >= f_eng)
    return lvl


# ---------------------------------------------------------------------------
# orchestration


def run(
    config: RunConfig,
    models: MultifidelityModel,
    space: ParameterSpace,
    *,
    checkpoint_path: str | None = None,
    literal_gamma: bool = False,
) -> EstimateReport:
    """Execute the configured method end to end and assemble the report.

    With ``checkpoint_path`` set, a resumable snapshot is written after
    initialization and after every completed level, so an evaluation failure
    mid-level leaves the last boundary on disk; ``resume_run`` picks it up.
    ``literal_gamma`` switches the autocorrelation inflation to the
    misweighted variant, for comparison only.
    """
    mf = models
    multifi = config.method in (MF_AK_MCS, MF_AL_SS)
    if multifi and mf.lf is None:
        raise ValueError(f"method {config.method} needs a cheap model")
    streams = rng_streams(config.rng_seed)
    if multifi:
        initialize_correction(mf, space, config.n_init, streams.init)
    init_hf = mf.hf.call_count
    return _run_levels(
        config, mf, space, streams.levels, [], init_hf, checkpoint_path, literal_gamma
    )


def _run_levels(config, mf, space, gen, levels, init_hf, checkpoint_path, literal_gamma):
    plan = _ProposalPlan.from_space(space, config.proposal)

    def _snapshot():
        if checkpoint_path:
            write_checkpoint(checkpoint_path, config, levels, mf, init_hf, gen)

    _snapshot()
    while True:
        if levels and levels[-1].is_final:
            break
        if not levels:
            lvl = run_first_level(mf, space, config, gen)
        else:
            lvl = run_conditional_level(mf, space, config, levels[-1], gen, plan=plan)
        levels.append(lvl)
        if not lvl.is_final and lvl.level >= config.max_levels:
            _refinalize_final(lvl, config)
        _snapshot()
        if lvl.is_final:
            break
    return _assemble_report(config, levels, mf, init_hf, literal_gamma)


def _assemble_report(config, levels, mf, init_hf, literal_gamma) -> EstimateReport:
    f_eng = config.threshold_exceedance
    sgn = config.sign
    n = config.n_per_level

    recs = [lvl.records() for lvl in levels]
    means = [level_probability(r) for r in recs]
    pairs = [level_cov(r, literal_form=literal_gamma) for r in recs]
    deltas = [d for d, _ in pairs]
    gammas = [g for _, g in pairs]
    uncorrelated = [
        math.sqrt((1.0 - p) / (n * p)) if 0.0 < p < 1.0 else math.inf for p in means
    ]

    last = levels[-1]
    final_fraction = float(np.mean(last.outputs >= f_eng))
    pf_ind, pf_w = pf_estimate(config.p0, means, final_fraction)

    crossed = last.threshold >= f_eng
    pinned_done = (config.fixed_levels == last.level) or (
        last.level == 1 and _single_level(config)
    )
    converged = bool(crossed or pinned_done)
    warnings = []
    if not crossed and not pinned_done:
        warnings.append(
            f"stopped at the level cap ({config.max_levels}) without reaching "
            f"the failure threshold"
        )
    for a, b in zip(levels, levels[1:]):
        if not (b.threshold > a.threshold):
            warnings.append(
                f"level thresholds are not strictly increasing at level {b.level}"
            )
            converged = False
            break
    if final_fraction == 0.0:
        warnings.append(
            "no samples beyond the failure threshold at the last level; "
            "the sampling budget is too small to resolve the failure probability"
        )

    return EstimateReport(
        method=config.method,
        pf_indicator=pf_ind,
        pf_weighted=pf_w,
        level_probabilities=means,
        level_covs=deltas,
        level_gammas=gammas,
        cov_total=total_cov(deltas),
        cov_total_uncorrelated=total_cov(uncorrelated),
        hf_calls=mf.hf.call_count,
        lf_calls=mf.lf_calls,
        hf_calls_initialization=init_hf,
        level_thresholds=[sgn * lvl.threshold for lvl in levels],
        converged=converged,
        n_levels=len(levels),
        p0=config.p0,
        n_per_level=config.n_per_level,
        warnings=warnings,
    )


# ---------------------------------------------------------------------------
# checkpointing


def _config_to_dict(c: RunConfig) -> dict:
    return {
        "n_per_level": c.n_per_level,
        "failure_threshold": c.failure_threshold,
        "fail_direction": c.fail_direction,
        "p0": c.p0,
        "max_levels": c.max_levels,
        "n_chains": c.n_chains,
        "n_init": c.n_init,
        "method": c.method,
        "rng_seed": c.rng_seed,
        "fixed_levels": c.fixed_levels,
        "learning": {
            "mode": c.learning.mode,
            "u_threshold": c.learning.u_threshold,
            "sigma_floor": c.learning.sigma_floor,
        },
        "proposal": {"scale": c.proposal.scale},
    }


def config_from_dict(blob: dict) -> RunConfig:
    """Build a RunConfig from nested plain data, rejecting unknown keys."""
    data = dict(blob)
    learn = dict(data.pop("learning", {}))
    prop = dict(data.pop("proposal", {}))
    known = {f.name for f in dataclasses.fields(RunConfig)} - {"learning", "proposal"}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ValueError(f"unknown config keys: {unknown}")
    unknown = sorted(set(learn) - {f.name for f in dataclasses.fields(LearningConfig)})
    if unknown:
        raise ValueError(f"unknown learning keys: {unknown}")
    unknown = sorted(set(prop) - {f.name for f in dataclasses.fields(ProposalSettings)})
    if unknown:
        raise ValueError(f"unknown proposal keys: {unknown}")
    return RunConfig(
        learning=LearningConfig(**learn), proposal=ProposalSettings(**prop), **data
    )


def write_checkpoint(path, config: RunConfig, levels, mf: MultifidelityModel, init_hf, gen) -> None:
    """Atomically write a resumable snapshot at a level boundary."""
    blob = {
        "format": _CHECKPOINT_FORMAT,
        "config": _config_to_dict(config),
        "hf_calls_initialization": int(init_hf),
        "hf_evaluator_calls": int(mf.hf.call_count),
        "lf_evaluator_calls": int(mf.lf.call_count) if mf.lf is not None else 0,
        "composite_hf_calls": int(mf.hf_calls),
        "composite_lf_calls": int(mf.lf_calls),
        "correction": None if mf.correction is None else mf.correction.to_dict(),
        "rng_state": gen.bit_generator.state,
        "levels": [lvl.to_dict() for lvl in levels],
    }
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(blob, fh)
    os.replace(tmp, path)


def resume_run(
    checkpoint_path,
    models: MultifidelityModel,
    space: ParameterSpace,
    *,
    literal_gamma: bool = False,
    keep_checkpointing: bool = True,
) -> EstimateReport:
    """Continue a checkpointed run from its last completed level.

    ``models`` must be assembled the same way as for the original run (same
    problem, same cheap model); the checkpoint restores the correction
    archive, the call counters, and the level stream's generator state, then
    the remaining levels execute as if never interrupted.
    """
    with open(checkpoint_path) as fh:
        blob = json.load(fh)
    if blob.get("format") != _CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format: {blob.get('format')!r}")
    config = config_from_dict(blob["config"])
    mf = models
    mf.hf.call_count = int(blob["hf_evaluator_calls"])
    if mf.lf is not None:
        mf.lf.call_count = int(blob["lf_evaluator_calls"])
    mf.hf_calls = int(blob["composite_hf_calls"])
    mf.lf_calls = int(blob["composite_lf_calls"])
    if blob["correction"] is not None:
        mf.correction = gp_mod.GPSurrogate.from_dict(blob["correction"])
    bit = np.random.PCG64()
    bit.state = blob["rng_state"]
    gen = np.random.Generator(bit)
    levels = [LevelState.from_dict(b) for b in blob["levels"]]
    return _run_levels(
        config,
        mf,
        space,
        gen,
        levels,
        int(blob["hf_calls_initialization"]),
        checkpoint_path if keep_checkpointing else None,
        literal_gamma,
    )

"""Benchmark problem catalog: input spaces, thresholds, model assembly.

Each problem bundles the input distributions, the expensive evaluator, the
failure threshold in physical units, and which side of the threshold counts
as failure. ``build_lf`` assembles the configured cheap model; the sampling
engine receives the pair through a MultifidelityModel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .distributions import ParameterSpace, normal, uniform
from .models import (
    ModelEvaluator,
    MultifidelityModel,
    four_branch,
    rastrigin_limit,
    borehole,
    make_function_evaluator,
    train_gp_lf,
)

__all__ = ["Problem", "PROBLEM_NAMES", "get_problem", "build_lf", "assemble_multifidelity"]

_BOREHOLE_ORDER = ("rw", "r", "Tu", "Hu", "Tl", "Hl", "L", "Kw")


@dataclass(frozen=True)
class Problem:
    name: str
    space: ParameterSpace
    hf: ModelEvaluator
    failure_threshold: float
    fail_direction: str  # "below" or "above" the threshold


def _four_branch_problem() -> Problem:
    space = ParameterSpace((normal("x1", 0.0, 1.0), normal("x2", 0.0, 1.0)))
    hf = make_function_evaluator("four-branch", space, space.hf_indices, four_branch)
    return Problem("four_branch", space, hf, 0.0, "below")


def _rastrigin_problem() -> Problem:
    space = ParameterSpace((normal("x1", 0.0, 1.0), normal("x2", 0.0, 1.0)))
    hf = make_function_evaluator("rastrigin", space, space.hf_indices, rastrigin_limit)
    return Problem("rastrigin", space, hf, 0.0, "below")


def _borehole_problem() -> Problem:
    space = ParameterSpace(
        (
            uniform("rw", 0.05, 0.15),
            normal("r", 7.71, 1.0056, log_space=True),
            uniform("Tu", 63070.0, 115600.0),
            uniform("Hu", 990.0, 1110.0),
            uniform("Tl", 63.1, 116.0),
            uniform("Hl", 700.0, 820.0),
            uniform("L", 1120.0, 1680.0),
            uniform("Kw", 9855.0, 12045.0),
        )
    )
    hf = make_function_evaluator(
        "borehole", space, space.hf_indices, lambda v: borehole(*v)
    )
    return Problem("borehole", space, hf, 270.0, "above")


_BUILDERS = {
    "four_branch": _four_branch_problem,
    "rastrigin": _rastrigin_problem,
    "borehole": _borehole_problem,
}

PROBLEM_NAMES = tuple(sorted(_BUILDERS))


def get_problem(name: str) -> Problem:
    try:
        return _BUILDERS[name]()
    except KeyError:
        raise ValueError(f"unknown problem {name!r}; choose from {PROBLEM_NAMES}") from None


def build_lf(problem: Problem, kind: str, rng, n_train: int = 20) -> ModelEvaluator:
    """Cheap-model variants:

    gp     -- frozen GP fit to n_train expensive evaluations (the calls land
              on the problem's HF counter: they are real initialization cost)
    exact  -- the expensive response itself behind a separate counter
    zero   -- constant zero, which turns the correction GP into a direct
              surrogate of the response (single-fidelity mode)
    """
    space = problem.space
    if kind == "gp":
        ev, _ = train_gp_lf(space, problem.hf, n_train, rng)
        return ev
    if kind == "exact":
        return ModelEvaluator(
            f"{problem.hf.name}-exact-lf",
            problem.hf.input_names,
            problem.hf._func,
        )
    if kind == "zero":
        names = tuple(space.variables[i].name for i in space.lf_indices)
        return ModelEvaluator("zero-lf", names, lambda params: 0.0)
    raise ValueError(f"unknown lf kind {kind!r}; choose gp, exact, or zero")


def assemble_multifidelity(problem: Problem, lf: ModelEvaluator,
                           refit_every=None) -> MultifidelityModel:
    return MultifidelityModel(problem.space, problem.hf, lf, refit_every=refit_every)

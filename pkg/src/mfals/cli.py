"""Configuration-driven command line front end.

Two subcommands:

    mfals run <spec.json> [--seed N] [--method NAME] [--out DIR] [--verbosity V]
    mfals validate <spec.json>

The spec file is strict JSON: unknown keys anywhere are an error, so typos
fail loudly instead of silently falling back to defaults. ``run`` writes
report.json, levels.csv, checkpoint.json, and (at per_sample verbosity)
samples.csv into the output directory, then exits 0 when the run converged,
2 when it did not, and 1 on any error. ``validate`` only parses the spec.

Console log level comes from the MFALS_LOG environment variable (default
INFO).
"""

import argparse
import csv
import dataclasses
import datetime
import json
import logging
import os
import sys

import numpy as np

from . import subsim
from .distributions import ParameterSpace, normal, truncated_normal, uniform
from .models import (
    ExternalAdapter,
    MultifidelityModel,
    borehole,
    four_branch,
    make_function_evaluator,
    rastrigin_limit,
)
from .problems import PROBLEM_NAMES, Problem, build_lf, get_problem

log = logging.getLogger("mfals.cli")

_BUILTIN = tuple(n for n in PROBLEM_NAMES)
_VERBOSITIES = ("summary", "per_level", "per_sample")
_LF_KINDS = ("gp", "exact", "zero")

# keys accepted at the top level of a spec file
_TOP_KEYS = {
    "problem": "one of " + ", ".join(_BUILTIN) + ", or external",
    "hf_command": "list of argv strings (external problems only)",
    "lf_command": "list of argv strings (external problems only)",
    "adapter_timeout": "positive number of seconds",
    "variables": "list of variable table entries",
    "lf": "one of gp, exact, zero (built-in problems)",
    "lf_train": "positive integer, cheap-model training budget",
    "refit_every": "positive integer or null",
    "out_dir": "output directory path",
    "verbosity": "one of " + ", ".join(_VERBOSITIES),
    "run": "nested run-configuration object",
}

_FAMILY_PARAMS = {
    "normal": ("mean", "std"),
    "uniform": ("lower", "upper"),
    "truncated_normal": ("mean", "std", "lower", "upper"),
}

# defaults injected into the nested run object when a spec omits them
_BUILTIN_SAMPLES_DEFAULT = 20000


class SpecError(ValueError):
    """A spec file failed validation; the message names the offending key."""


@dataclasses.dataclass
class RunSpec:
    problem: str
    config: subsim.RunConfig
    variables: tuple  # RandomVariable tuple or None for built-in defaults
    hf_command: list
    lf_command: list
    adapter_timeout: float
    lf_kind: str
    lf_train: int
    refit_every: int
    out_dir: str
    verbosity: str


def _require(cond, msg):
    if not cond:
        raise SpecError(msg)


def _parse_variable(entry, position):
    where = f"variables[{position}]"
    _require(isinstance(entry, dict), f"{where}: expected an object")
    allowed = {"name", "family", "params", "log_space", "in_hf", "in_lf"}
    for key in entry:
        _require(key in allowed,
                 f"{where}: unknown key {key!r} (expected one of {sorted(allowed)})")
    for key in ("name", "family", "params"):
        _require(key in entry, f"{where}: missing required key {key!r}")
    name = entry["name"]
    _require(isinstance(name, str) and name, f"{where}.name: expected a nonempty string")
    family = entry["family"]
    _require(family in _FAMILY_PARAMS,
             f"{where}.family: {family!r} is not one of {sorted(_FAMILY_PARAMS)}")
    params = entry["params"]
    wanted = _FAMILY_PARAMS[family]
    _require(isinstance(params, dict), f"{where}.params: expected an object")
    for key in params:
        _require(key in wanted,
                 f"{where}.params: unknown key {key!r} for family {family} "
                 f"(expected {list(wanted)})")
    for key in wanted:
        _require(key in params, f"{where}.params: missing {key!r} for family {family}")
        _require(isinstance(params[key], (int, float)) and not isinstance(params[key], bool),
                 f"{where}.params.{key}: expected a number")
    log_space = entry.get("log_space", False)
    _require(isinstance(log_space, bool), f"{where}.log_space: expected true or false")
    in_hf = entry.get("in_hf", True)
    in_lf = entry.get("in_lf", True)
    _require(isinstance(in_hf, bool), f"{where}.in_hf: expected true or false")
    _require(isinstance(in_lf, bool), f"{where}.in_lf: expected true or false")
    try:
        if family == "normal":
            rv = normal(name, params["mean"], params["std"], log_space=log_space)
        elif family == "uniform":
            rv = uniform(name, params["lower"], params["upper"], log_space=log_space)
        else:
            rv = truncated_normal(name, params["mean"], params["std"],
                                  params["lower"], params["upper"], log_space=log_space)
    except ValueError as exc:
        raise SpecError(f"{where} ({name}): {exc}") from None
    return rv, in_hf, in_lf


def _parse_command(blob, key):
    cmd = blob.get(key)
    if cmd is None:
        return []
    _require(isinstance(cmd, list) and cmd and all(isinstance(a, str) for a in cmd),
             f"{key}: expected a nonempty list of argv strings")
    return list(cmd)


def parse_spec(path):
    """Read and fully validate a spec file. Raises SpecError on any problem."""
    try:
        with open(path) as fh:
            blob = json.load(fh)
    except OSError as exc:
        raise SpecError(f"cannot read spec file: {exc}") from None
    except json.JSONDecodeError as exc:
        raise SpecError(f"spec file is not valid JSON: {exc}") from None
    _require(isinstance(blob, dict), "spec root: expected a JSON object")
    for key in blob:
        _require(key in _TOP_KEYS,
                 f"unknown key {key!r} (expected one of {sorted(_TOP_KEYS)})")
    _require("problem" in blob, "missing required key 'problem'")
    problem = blob["problem"]
    _require(problem in _BUILTIN or problem == "external",
             f"problem: {problem!r} is not one of {list(_BUILTIN) + ['external']}")

    hf_command = _parse_command(blob, "hf_command")
    lf_command = _parse_command(blob, "lf_command")
    timeout = blob.get("adapter_timeout", 3600.0)
    _require(isinstance(timeout, (int, float)) and not isinstance(timeout, bool)
             and timeout > 0, "adapter_timeout: expected a positive number")

    raw_vars = blob.get("variables")
    variables = None
    if raw_vars is not None:
        _require(isinstance(raw_vars, list) and raw_vars,
                 "variables: expected a nonempty list")
        parsed = [_parse_variable(v, i) for i, v in enumerate(raw_vars)]
        names = [rv.name for rv, _, _ in parsed]
        _require(len(set(names)) == len(names),
                 f"variables: duplicate names in {names}")
        variables = tuple(parsed)

    if problem == "external":
        _require(hf_command, "external problems require 'hf_command'")
        _require(variables is not None, "external problems require a 'variables' table")
    else:
        _require(not hf_command and not lf_command,
                 "hf_command/lf_command only apply to external problems")

    lf_kind = blob.get("lf", "gp")
    _require(lf_kind in _LF_KINDS, f"lf: {lf_kind!r} is not one of {list(_LF_KINDS)}")
    lf_train = blob.get("lf_train", 20)
    _require(isinstance(lf_train, int) and not isinstance(lf_train, bool) and lf_train >= 2,
             "lf_train: expected an integer >= 2")
    refit_every = blob.get("refit_every")
    if refit_every is not None:
        _require(isinstance(refit_every, int) and not isinstance(refit_every, bool)
                 and refit_every >= 1, "refit_every: expected a positive integer or null")

    out_dir = blob.get("out_dir", "mfals-out")
    _require(isinstance(out_dir, str) and out_dir, "out_dir: expected a nonempty path")
    verbosity = blob.get("verbosity", "summary")
    _require(verbosity in _VERBOSITIES,
             f"verbosity: {verbosity!r} is not one of {list(_VERBOSITIES)}")

    run_blob = blob.get("run", {})
    _require(isinstance(run_blob, dict), "run: expected an object")
    run_blob = dict(run_blob)
    if problem != "external":
        reference = get_problem(problem)
        run_blob.setdefault("failure_threshold", reference.failure_threshold)
        run_blob.setdefault("fail_direction", reference.fail_direction)
        run_blob.setdefault("n_per_level", _BUILTIN_SAMPLES_DEFAULT)
    else:
        _require("failure_threshold" in run_blob,
                 "external problems require run.failure_threshold")
        _require("fail_direction" in run_blob,
                 "external problems require run.fail_direction")
        _require("n_per_level" in run_blob,
                 "external problems require run.n_per_level")
    try:
        config = subsim.config_from_dict(run_blob)
    except (ValueError, TypeError) as exc:
        raise SpecError(f"run: {exc}") from None

    return RunSpec(
        problem=problem,
        config=config,
        variables=variables,
        hf_command=hf_command,
        lf_command=lf_command,
        adapter_timeout=float(timeout),
        lf_kind=lf_kind,
        lf_train=lf_train,
        refit_every=refit_every,
        out_dir=out_dir,
        verbosity=verbosity,
    )


# ---------------------------------------------------------------------------
# model assembly


def _space_from_table(parsed):
    rvs = tuple(rv for rv, _, _ in parsed)
    hf_idx = tuple(i for i, (_, in_hf, _) in enumerate(parsed) if in_hf)
    lf_idx = tuple(i for i, (_, _, in_lf) in enumerate(parsed) if in_lf)
    try:
        return ParameterSpace(rvs, hf_idx, lf_idx)
    except ValueError as exc:
        raise SpecError(f"variables: {exc}") from None


# raw array-valued responses of the built-in problems, for rebinding to a
# user-supplied distribution table
_ARRAY_FUNCS = {
    "four_branch": four_branch,
    "rastrigin": rastrigin_limit,
    "borehole": lambda v: borehole(*v),
}


def _builtin_problem(spec):
    base = get_problem(spec.problem)
    if spec.variables is None:
        return base
    expected = tuple(v.name for v in base.space.variables)
    got = tuple(rv.name for rv, _, _ in spec.variables)
    _require(got == expected,
             f"variables: {spec.problem} expects names {list(expected)} in order, "
             f"got {list(got)}")
    space = _space_from_table(spec.variables)
    hf = make_function_evaluator(
        base.hf.name, space, space.hf_indices, _ARRAY_FUNCS[spec.problem]
    )
    return Problem(base.name, space, hf, base.failure_threshold, base.fail_direction)


def _assemble(spec):
    """Build (space, MultifidelityModel, cleanup) for the spec."""
    cleanup = []
    cfg = spec.config
    needs_lf = cfg.method in (subsim.MF_AK_MCS, subsim.MF_AL_SS)
    if spec.problem == "external":
        space = _space_from_table(spec.variables)
        hf_adapter = ExternalAdapter(spec.hf_command, timeout=spec.adapter_timeout)
        cleanup.append(hf_adapter.close)
        _check_adapter_inputs("hf_command", hf_adapter, space, space.hf_indices)
        hf = hf_adapter.as_evaluator("hf-adapter")
        lf = None
        if needs_lf:
            _require(spec.lf_command,
                     f"method {cfg.method} needs a cheap model: set 'lf_command'")
        if spec.lf_command:
            lf_adapter = ExternalAdapter(spec.lf_command, timeout=spec.adapter_timeout)
            cleanup.append(lf_adapter.close)
            _check_adapter_inputs("lf_command", lf_adapter, space, space.lf_indices)
            lf = lf_adapter.as_evaluator("lf-adapter")
        mf = MultifidelityModel(space, hf, lf, refit_every=spec.refit_every)
        return space, mf, cleanup
    prob = _builtin_problem(spec)
    lf = None
    if needs_lf:
        streams = subsim.rng_streams(cfg.rng_seed)
        lf = build_lf(prob, spec.lf_kind, streams.lf_training, n_train=spec.lf_train)
    mf = MultifidelityModel(prob.space, prob.hf, lf, refit_every=spec.refit_every)
    return prob.space, mf, cleanup


def _check_adapter_inputs(which, adapter, space, indices):
    declared = set(adapter.inputs)
    table = {space.variables[i].name for i in indices}
    _require(declared == table,
             f"{which}: adapter declares inputs {sorted(declared)} but the variable "
             f"table assigns {sorted(table)}")


# ---------------------------------------------------------------------------
# output files


def _write_report(path, spec, rep):
    blob = {
        "generated_at": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "problem": spec.problem,
        "config": subsim._config_to_dict(spec.config),
        "report": rep.to_dict(),
    }
    with open(path, "w") as fh:
        json.dump(blob, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_levels_csv(path, rep, levels):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["level", "threshold", "level_probability", "level_cov",
                         "hf_calls_cumulative"])
        for i in range(rep.n_levels):
            writer.writerow([
                i + 1,
                repr(rep.level_thresholds[i]),
                repr(rep.level_probabilities[i]),
                repr(rep.level_covs[i]),
                levels[i].hf_calls_end,
            ])


def _write_samples_csv(path, spec, space, levels):
    sign = spec.config.sign
    names = [v.name for v in space.variables]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["level", "chain", "step"] + names
                        + ["value", "fidelity", "u", "record", "hf_calls_cumulative"])
        for lvl in levels:
            phys = space.to_physical(lvl.samples)
            records = lvl.records()
            for i in range(len(lvl.outputs)):
                rec = records[i]
                writer.writerow(
                    [lvl.level, int(lvl.chain_ids[i]), int(lvl.steps[i])]
                    + [repr(float(v)) for v in phys[i]]
                    + [repr(sign * float(lvl.outputs[i])),
                       "hf" if lvl.is_hf[i] else "lf",
                       repr(float(lvl.u_values[i])),
                       repr(float(rec.value)),
                       int(lvl.hf_cum[i])]
                )


def _load_levels(checkpoint_path):
    with open(checkpoint_path) as fh:
        blob = json.load(fh)
    return [subsim.LevelState.from_dict(d) for d in blob["levels"]]


# ---------------------------------------------------------------------------
# subcommands


def _cmd_validate(args):
    try:
        spec = parse_spec(args.spec)
    except SpecError as exc:
        print(f"spec error: {exc}", file=sys.stderr)
        return 1
    cfg = spec.config
    print(f"ok: problem={spec.problem} method={cfg.method} "
          f"n_per_level={cfg.n_per_level} max_levels={cfg.max_levels} "
          f"seed={cfg.rng_seed} out={spec.out_dir}")
    return 0


def _apply_overrides(spec, args):
    cfg_blob = subsim._config_to_dict(spec.config)
    if args.seed is not None:
        cfg_blob["rng_seed"] = args.seed
    if args.method is not None:
        cfg_blob["method"] = args.method
    try:
        config = subsim.config_from_dict(cfg_blob)
    except ValueError as exc:
        raise SpecError(str(exc)) from None
    out_dir = args.out if args.out is not None else spec.out_dir
    verbosity = args.verbosity if args.verbosity is not None else spec.verbosity
    return dataclasses.replace(spec, config=config, out_dir=out_dir, verbosity=verbosity)


def _cmd_run(args):
    try:
        spec = parse_spec(args.spec)
        spec = _apply_overrides(spec, args)
    except SpecError as exc:
        print(f"spec error: {exc}", file=sys.stderr)
        return 1

    os.makedirs(spec.out_dir, exist_ok=True)
    checkpoint = os.path.join(spec.out_dir, "checkpoint.json")
    cleanup = []
    try:
        space, mf, cleanup = _assemble(spec)
        log.info("running %s with %s, %d samples per level, seed %d",
                 spec.problem, spec.config.method, spec.config.n_per_level,
                 spec.config.rng_seed)
        rep = subsim.run(spec.config, mf, space, checkpoint_path=checkpoint)
    except SpecError as exc:
        print(f"spec error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports, not raises
        log.error("run failed: %s", exc)
        print(f"error: {exc}", file=sys.stderr)
        if os.path.exists(checkpoint):
            print(f"checkpoint retained at {checkpoint}", file=sys.stderr)
        return 1
    finally:
        for fn in cleanup:
            try:
                fn()
            except Exception:  # noqa: BLE001 - best-effort adapter shutdown
                pass

    levels = _load_levels(checkpoint)
    _write_report(os.path.join(spec.out_dir, "report.json"), spec, rep)
    _write_levels_csv(os.path.join(spec.out_dir, "levels.csv"), rep, levels)
    if spec.verbosity == "per_sample":
        _write_samples_csv(os.path.join(spec.out_dir, "samples.csv"), spec, space, levels)

    if spec.verbosity in ("per_level", "per_sample"):
        for i in range(rep.n_levels):
            log.info("level %d: threshold=%.6g p=%.4g cov=%.3g hf=%d",
                     i + 1, rep.level_thresholds[i], rep.level_probabilities[i],
                     rep.level_covs[i], levels[i].hf_calls_end)
    log.info("pf_weighted=%.6g pf_indicator=%.6g cov=%.4g hf_calls=%d converged=%s",
             rep.pf_weighted, rep.pf_indicator, rep.cov_total, rep.hf_calls,
             rep.converged)
    for note in rep.warnings:
        log.warning("%s", note)
    print(f"pf_weighted={rep.pf_weighted:.6g} cov={rep.cov_total:.4g} "
          f"hf_calls={rep.hf_calls} converged={rep.converged} out={spec.out_dir}")
    return 0 if rep.converged else 2


def main(argv=None):
    logging.basicConfig(
        level=os.environ.get("MFALS_LOG", "INFO").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = argparse.ArgumentParser(
        prog="mfals",
        description="Rare-event probability estimation with subset simulation "
                    "and adaptive high/low fidelity model selection.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute a run described by a spec file")
    p_run.add_argument("spec", help="path to the JSON spec")
    p_run.add_argument("--seed", type=int, default=None, help="override run.rng_seed")
    p_run.add_argument("--method", default=None,
                       help="override run.method (MC, SS, MF_AK_MCS, MF_AL_SS)")
    p_run.add_argument("--out", default=None, help="override the output directory")
    p_run.add_argument("--verbosity", default=None, choices=_VERBOSITIES,
                       help="override trace verbosity")
    p_run.set_defaults(func=_cmd_run)

    p_val = sub.add_parser("validate", help="parse and validate a spec file")
    p_val.add_argument("spec", help="path to the JSON spec")
    p_val.set_defaults(func=_cmd_validate)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

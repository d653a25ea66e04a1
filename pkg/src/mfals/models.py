"""Model evaluators: analytic benchmarks, external solvers, multifidelity fusion.

Everything that can produce a scalar response lives behind ModelEvaluator,
which speaks named physical parameters and counts its calls. The
MultifidelityModel composite pairs an expensive evaluator with a cheap one
plus a GP correction trained on their differences over the full parameter
set; it is the object the sampling engine talks to.
"""

from __future__ import annotations

import json
import math
import queue
import subprocess
import threading

import numpy as np
from scipy.stats import qmc

from . import gp as gp_mod
from .distributions import ParameterSpace

__all__ = [
    "EvaluationError",
    "ProtocolError",
    "AdapterCrashError",
    "ModelEvaluator",
    "MultifidelityModel",
    "ExternalAdapter",
    "four_branch",
    "rastrigin_limit",
    "borehole",
    "external_evaluate",
    "evaluate_lf_corrected",
    "evaluate_hf_and_adapt",
    "make_function_evaluator",
    "make_gp_surrogate_evaluator",
    "train_gp_lf",
]


class EvaluationError(RuntimeError):
    """The model ran but could not produce a usable value."""


class ProtocolError(RuntimeError):
    """An external adapter broke the line-protocol contract."""


class AdapterCrashError(RuntimeError):
    """The external adapter process died."""


# ---------------------------------------------------------------------------
# analytic benchmarks


def four_branch(x):
    """Series system of four failure branches; response is their minimum.

    x: array-like with the two coordinates in the trailing dimension, or a
    flat 2-vector. Symmetric under swapping the coordinates.
    """
    x = np.asarray(x, dtype=float)
    x1, x2 = x[..., 0], x[..., 1]
    su = (x1 + x2) / math.sqrt(2.0)
    quad = 3.0 + 0.1 * (x1 - x2) ** 2
    b3 = (x1 - x2) + 6.0 / math.sqrt(2.0)
    b4 = (x2 - x1) + 6.0 / math.sqrt(2.0)
    out = np.minimum(np.minimum(quad - su, quad + su), np.minimum(b3, b4))
    return float(out) if out.ndim == 0 else out


def rastrigin_limit(x):
    """10 - sum_i (x_i^2 - 5 cos(2 pi x_i)) over the two coordinates."""
    x = np.asarray(x, dtype=float)
    terms = x**2 - 5.0 * np.cos(2.0 * math.pi * x)
    out = 10.0 - terms[..., 0] - terms[..., 1]
    return float(out) if out.ndim == 0 else out


def borehole(rw, r, Tu, Hu, Tl, Hl, L, Kw):
    """Water flow rate through a borehole between two aquifers.

    Args mirror the usual parameterization: borehole radius rw, radius of
    influence r, upper/lower transmissivities Tu/Tl, potentiometric heads
    Hu/Hl, borehole length L, and hydraulic conductivity Kw.

    Raises EvaluationError when r <= rw (log argument would be nonpositive)
    or any transmissivity/length/conductivity is nonpositive.
    """
    if rw <= 0 or r <= rw:
        raise EvaluationError("borehole requires r > rw > 0")
    if Tu <= 0 or Tl <= 0 or L < 0 or Kw <= 0:
        raise EvaluationError("borehole requires positive transmissivities, length, Kw")
    log_ratio = math.log(r / rw)
    denom = log_ratio * (
        1.0 + 2.0 * L * Tu / (log_ratio * rw * rw * Kw) + Tu / Tl
    )
    return 2.0 * math.pi * Tu * (Hu - Hl) / denom


# ---------------------------------------------------------------------------
# evaluator abstraction


class ModelEvaluator:
    """Named-parameter scalar model with a call counter.

    ``func`` receives a dict restricted to ``input_names`` (physical units)
    and returns a float. ``audit_every > 0`` re-runs every k-th evaluation
    and raises if the repeat disagrees, to catch nondeterministic externals;
    it is off by default and the audit repeat does not count as a call.
    """

    def __init__(self, name: str, input_names, func, audit_every: int = 0):
        self.name = name
        self.input_names = tuple(input_names)
        self._func = func
        self.audit_every = int(audit_every)
        self.call_count = 0

    def evaluate(self, params: dict) -> float:
        missing = [k for k in self.input_names if k not in params]
        if missing:
            raise EvaluationError(f"{self.name}: missing inputs {missing}")
        restricted = {k: float(params[k]) for k in self.input_names}
        value = float(self._func(restricted))
        self.call_count += 1
        if self.audit_every > 0 and self.call_count % self.audit_every == 0:
            repeat = float(self._func(restricted))
            if repeat != value:
                raise EvaluationError(
                    f"{self.name}: nondeterministic output at audit "
                    f"({value!r} then {repeat!r})"
                )
        return value


def make_function_evaluator(name, space: ParameterSpace, indices, array_func, audit_every=0):
    """Wrap f(physical vector) as an evaluator over the named sub-vector."""
    names = tuple(space.variables[i].name for i in indices)

    def call(params):
        vec = np.array([params[k] for k in names])
        return array_func(vec)

    return ModelEvaluator(name, names, call, audit_every=audit_every)


def make_gp_surrogate_evaluator(name, space: ParameterSpace, indices, surrogate):
    """Frozen GP posterior mean as a cheap model (inputs mapped to underlying
    coordinates, where the surrogate was trained)."""
    names = tuple(space.variables[i].name for i in indices)
    logs = tuple(space.variables[i].log_space for i in indices)

    def call(params):
        vec = np.array(
            [math.log(params[k]) if lg else params[k] for k, lg in zip(names, logs)]
        )
        return surrogate.predict(vec)[0]

    return ModelEvaluator(name, names, call)


def _design_box(space: ParameterSpace):
    """Training box per underlying coordinate: the support for bounded
    marginals, mean +/- 5 std for unbounded ones."""
    lo = np.empty(space.dim)
    hi = np.empty(space.dim)
    for i, v in enumerate(space.variables):
        if v.bounded:
            lo[i], hi[i] = v.support
        else:
            m, s = v.marginal_mean(), v.marginal_std()
            lo[i], hi[i] = m - 5.0 * s, m + 5.0 * s
    return lo, hi


def train_gp_lf(space: ParameterSpace, hf: ModelEvaluator, n_train: int, rng):
    """Stand-in cheap model: a GP fit to n_train expensive evaluations.

    The design is a Latin hypercube over a box covering the input range
    (bounded supports exactly, unbounded marginals out to five standard
    deviations), so the surrogate sees the tails a purely random design of
    this size would miss. Queries ``hf`` directly (the calls land on its
    counter) and freezes the fitted surrogate behind an evaluator.
    Returns (evaluator, surrogate).
    """
    sampler = qmc.LatinHypercube(d=space.dim, seed=rng)
    lo, hi = _design_box(space)
    Z = lo + sampler.random(n_train) * (hi - lo)
    X_phys = space.to_physical(Z)
    y = np.array(
        [hf.evaluate(space.named_params(row, space.hf_indices)) for row in X_phys]
    )
    Z_lf = Z[:, list(space.lf_indices)]
    surrogate = gp_mod.fit(Z_lf, y)
    ev = make_gp_surrogate_evaluator("gp-lf", space, space.lf_indices, surrogate)
    return ev, surrogate


# ---------------------------------------------------------------------------
# multifidelity composite


class MultifidelityModel:
    """Expensive model + cheap model + GP correction on their differences.

    The composite works in underlying coordinates over the full parameter
    set; it maps to physical named parameters at the evaluator boundary. The
    correction GP sees the full underlying vector even when the two models
    consume different sub-vectors. ``hf_calls`` / ``lf_calls`` count real
    evaluations routed through this composite.
    """

    def __init__(self, space: ParameterSpace, hf: ModelEvaluator, lf: ModelEvaluator,
                 correction=None, refit_every=None):
        self.space = space
        self.hf = hf
        self.lf = lf
        self.correction = correction
        self.refit_every = refit_every
        self.hf_calls = 0
        self.lf_calls = 0
        self._lf_memo_key = None
        self._lf_memo_val = 0.0

    def _named(self, x_und, indices):
        x_phys = self.space.to_physical(np.asarray(x_und, dtype=float))
        return self.space.named_params(x_phys, indices)

    def lf_value(self, x_und) -> float:
        """Raw cheap-model value; memoizes the last point so an expensive
        call right after a corrected query does not bill the cheap model twice."""
        key = np.asarray(x_und, dtype=float).tobytes()
        if key == self._lf_memo_key:
            return self._lf_memo_val
        val = self.lf.evaluate(self._named(x_und, self.space.lf_indices))
        self.lf_calls += 1
        self._lf_memo_key = key
        self._lf_memo_val = val
        return val

    def hf_value(self, x_und) -> float:
        """Expensive value alone, without touching the correction."""
        val = self.hf.evaluate(self._named(x_und, self.space.hf_indices))
        self.hf_calls += 1
        return val

    def initialize_correction(self, X_und: np.ndarray):
        """Fit the correction on expensive-minus-cheap differences at the
        given underlying design points. Both counters advance per row."""
        diffs = np.empty(X_und.shape[0])
        for i, x in enumerate(X_und):
            f_val = self.lf_value(x)
            diffs[i] = self.hf_value(x) - f_val
        self.correction = gp_mod.fit(X_und, diffs)
        self._lf_memo_key = None
        return self.correction

    def evaluate_lf_corrected(self, x_und):
        """(mean, std): cheap value plus correction mean, correction std."""
        f_val = self.lf_value(x_und)
        if self.correction is None:
            return f_val, 0.0
        eps_mean, eps_std = self.correction.predict(np.asarray(x_und, dtype=float))
        return f_val + eps_mean, eps_std

    def evaluate_hf_and_adapt(self, x_und) -> float:
        """Expensive value; archives (x, F - f) and retrains the correction."""
        x_und = np.asarray(x_und, dtype=float)
        f_val = self.lf_value(x_und)
        F_val = self.hf_value(x_und)
        if self.correction is not None:
            self.correction = gp_mod.update(
                self.correction, x_und, F_val - f_val, refit_every=self.refit_every
            )
            # the archived difference changes the corrected value at this point
            self._lf_memo_key = None
        return F_val


def evaluate_lf_corrected(mf: MultifidelityModel, x):
    return mf.evaluate_lf_corrected(x)


def evaluate_hf_and_adapt(mf: MultifidelityModel, x):
    return mf.evaluate_hf_and_adapt(x)


# ---------------------------------------------------------------------------
# external adapter: line-delimited JSON over a child process's stdio


def _reader(stream, q):
    for line in iter(stream.readline, ""):
        q.put(line)
    q.put(None)  # EOF marker


class ExternalAdapter:
    """Handle to a solver child process speaking the line protocol.

    Startup handshake: the child prints {"ready":true,"inputs":[...]} once.
    Each request is one line {"id":N,"params":{...}}; each response one line
    {"id":N,"value":V} or {"id":N,"error":"msg"}, flushed immediately. One
    request is in flight at a time per handle.
    """

    def __init__(self, argv, timeout: float = 3600.0):
        self.timeout = float(timeout)
        self._proc = subprocess.Popen(
            argv,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            text=True,
            bufsize=1,
        )
        self._queue: queue.Queue = queue.Queue()
        self._thread = threading.Thread(
            target=_reader, args=(self._proc.stdout, self._queue), daemon=True
        )
        self._thread.start()
        self._next_id = 1
        hello = self._read_line()
        try:
            blob = json.loads(hello)
        except json.JSONDecodeError as exc:
            raise ProtocolError(f"bad handshake line: {hello!r}") from exc
        if blob.get("ready") is not True or "inputs" not in blob:
            raise ProtocolError(f"bad handshake content: {blob!r}")
        self.inputs = [str(s) for s in blob["inputs"]]

    def _read_line(self) -> str:
        try:
            line = self._queue.get(timeout=self.timeout)
        except queue.Empty:
            raise EvaluationError(
                f"adapter gave no response within {self.timeout:.0f} s"
            ) from None
        if line is None:
            code = self._proc.wait()
            if code != 0:
                raise AdapterCrashError(f"adapter exited with status {code}")
            raise ProtocolError("adapter closed its output stream mid-protocol")
        return line

    def evaluate(self, params: dict) -> float:
        if self._proc.poll() is not None and self._proc.returncode != 0:
            raise AdapterCrashError(f"adapter exited with status {self._proc.returncode}")
        req_id = self._next_id
        self._next_id += 1
        request = json.dumps(
            {"id": req_id, "params": {k: float(v) for k, v in params.items()}}
        )
        try:
            self._proc.stdin.write(request + "\n")
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError):
            code = self._proc.wait()
            raise AdapterCrashError(f"adapter exited with status {code}") from None
        line = self._read_line()
        try:
            blob = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ProtocolError(f"unparseable response line: {line!r}") from exc
        if blob.get("id") != req_id:
            raise ProtocolError(f"response id {blob.get('id')!r} != request id {req_id}")
        if "error" in blob:
            raise EvaluationError(str(blob["error"]))
        if "value" not in blob or not isinstance(blob["value"], (int, float)):
            raise ProtocolError(f"response carries no numeric value: {line!r}")
        return float(blob["value"])

    def close(self):
        if self._proc.poll() is None:
            try:
                self._proc.stdin.close()
            except OSError:
                pass
            try:
                self._proc.wait(timeout=5.0)
            except subprocess.TimeoutExpired:
                self._proc.kill()
                self._proc.wait()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def as_evaluator(self, name: str, audit_every: int = 0) -> ModelEvaluator:
        return ModelEvaluator(name, self.inputs, self.evaluate, audit_every=audit_every)


def external_evaluate(adapter: ExternalAdapter, params: dict) -> float:
    return adapter.evaluate(params)

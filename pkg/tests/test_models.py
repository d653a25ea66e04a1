"""Benchmarks, evaluator plumbing, multifidelity fusion, adapter protocol."""

import math
import sys

import numpy as np
import pytest

from mfals.distributions import ParameterSpace, normal
from mfals.models import (
    AdapterCrashError,
    EvaluationError,
    ExternalAdapter,
    ModelEvaluator,
    MultifidelityModel,
    ProtocolError,
    borehole,
    evaluate_hf_and_adapt,
    evaluate_lf_corrected,
    external_evaluate,
    four_branch,
    make_function_evaluator,
    rastrigin_limit,
    train_gp_lf,
)
from mfals.problems import build_lf, get_problem

# ------------------------------------------------------------- benchmarks


def test_four_branch_origin():
    # branches at the origin: {3, 3, 6/sqrt2, 6/sqrt2}; the minimum is 3
    assert four_branch([0.0, 0.0]) == pytest.approx(3.0, abs=1e-12)


def test_four_branch_swap_symmetry():
    rng = np.random.default_rng(3)
    for _ in range(100):
        a, b = rng.normal(size=2) * 2
        assert four_branch([a, b]) == pytest.approx(four_branch([b, a]), abs=1e-12)


def test_four_branch_failure_point():
    # at (3,3): first branch 3 + 0 - 6/sqrt2, the others larger
    expected = 3.0 - 6.0 / math.sqrt(2.0)
    assert expected == pytest.approx(-1.2426, abs=5e-5)
    assert four_branch([3.0, 3.0]) == pytest.approx(expected, abs=1e-12)


def test_four_branch_vectorized():
    X = np.random.default_rng(0).normal(size=(50, 2))
    batch = four_branch(X)
    assert batch.shape == (50,)
    for i in range(50):
        assert batch[i] == pytest.approx(four_branch(X[i]), abs=1e-14)


def test_rastrigin_values():
    assert rastrigin_limit([0.0, 0.0]) == pytest.approx(20.0, abs=1e-12)
    # (0.5, 0): 10 - (0.25 - 5 cos(pi)) - (0 - 5) = 10 - 5.25 + 5
    assert rastrigin_limit([0.5, 0.0]) == pytest.approx(9.75, abs=1e-12)


def test_rastrigin_even():
    rng = np.random.default_rng(4)
    for _ in range(100):
        a, b = rng.normal(size=2) * 2
        assert rastrigin_limit([a, b]) == pytest.approx(rastrigin_limit([-a, b]), abs=1e-12)
        assert rastrigin_limit([a, b]) == pytest.approx(rastrigin_limit([a, -b]), abs=1e-12)


def test_borehole_midpoint_oracle():
    # midpoints of the input ranges (governing mean for the log-space radius),
    # response assembled term by term as an independent check
    rw, r = 0.075, math.exp(7.71)
    Tu, Hu = (63070.0 + 115600.0) / 2, (990.0 + 1110.0) / 2
    Tl, Hl = (63.1 + 116.0) / 2, (700.0 + 820.0) / 2
    L, Kw = (1120.0 + 1680.0) / 2, (9855.0 + 12045.0) / 2
    log_ratio = math.log(r) - math.log(rw)
    numerator = 2.0 * math.pi * Tu * (Hu - Hl)
    pipe_term = (2.0 * L * Tu) / (log_ratio * rw**2 * Kw)
    expected = numerator / (log_ratio * (1.0 + pipe_term + Tu / Tl))
    assert expected == pytest.approx(39.98139, abs=1e-4)
    assert borehole(rw, r, Tu, Hu, Tl, Hl, L, Kw) == pytest.approx(expected, rel=1e-12)


def test_borehole_increasing_in_upper_head():
    rng = np.random.default_rng(5)
    space = get_problem("borehole").space
    z = space.sample_underlying(rng, 50)
    for row in space.to_physical(z):
        base = borehole(*row)
        row2 = row.copy()
        row2[3] += 10.0  # Hu
        assert borehole(*row2) > base


def test_borehole_transmissivity_scaling_at_zero_length():
    # with L -> 0 the conductivity term drops; doubling both transmissivities
    # keeps their ratio and doubles the flow
    args = dict(rw=0.075, r=2000.0, Hu=1050.0, Hl=760.0, L=1e-9, Kw=10950.0)
    f1 = borehole(Tu=89335.0, Tl=89.55, **args)
    f2 = borehole(Tu=2 * 89335.0, Tl=2 * 89.55, **args)
    assert f2 / f1 == pytest.approx(2.0, rel=1e-8)


def test_borehole_domain_errors():
    with pytest.raises(EvaluationError):
        borehole(0.1, 0.05, 89335.0, 1050.0, 89.55, 760.0, 1400.0, 10950.0)  # r < rw
    with pytest.raises(EvaluationError):
        borehole(0.075, 2000.0, -1.0, 1050.0, 89.55, 760.0, 1400.0, 10950.0)


def test_benchmark_sweeps_finite_and_positive():
    rng = np.random.default_rng(6)
    X = rng.normal(size=(2800, 2))
    assert np.all(np.isfinite(four_branch(X)))
    assert np.all(np.isfinite(rastrigin_limit(X)))
    bore = get_problem("borehole")
    z = bore.space.sample_underlying(rng, 2800)
    vals = [borehole(*row) for row in bore.space.to_physical(z)]
    assert np.all(np.isfinite(vals))
    assert np.all(np.array(vals) > 0)


# ----------------------------------------------------------- evaluators


def test_evaluator_counter_and_restriction():
    space = ParameterSpace((normal("x1", 0, 1), normal("x2", 0, 1)))
    ev = make_function_evaluator("fb", space, space.hf_indices, four_branch)
    assert ev.call_count == 0
    v = ev.evaluate({"x1": 0.0, "x2": 0.0, "extra": 99.0})  # extras ignored
    assert v == pytest.approx(3.0)
    assert ev.call_count == 1
    with pytest.raises(EvaluationError):
        ev.evaluate({"x1": 0.0})
    assert ev.call_count == 1  # failed call not counted


def test_evaluator_determinism_audit():
    state = {"n": 0}

    def flaky(params):
        state["n"] += 1
        return float(state["n"])

    ev = ModelEvaluator("flaky", ("x",), flaky, audit_every=2)
    ev.evaluate({"x": 0.0})
    with pytest.raises(EvaluationError, match="nondeterministic"):
        ev.evaluate({"x": 0.0})
    ok = ModelEvaluator("ok", ("x",), lambda p: p["x"] * 2, audit_every=1)
    assert ok.evaluate({"x": 2.0}) == 4.0
    assert ok.call_count == 1  # audit repeat doesn't count


# ----------------------------------------------------- multifidelity fusion


def _mf_pair(seed=0, n_init=20):
    problem = get_problem("four_branch")
    rng = np.random.default_rng(seed)
    lf = build_lf(problem, "gp", rng, n_train=20)
    mf = MultifidelityModel(problem.space, problem.hf, lf)
    X = problem.space.sample_underlying(rng, n_init)
    mf.initialize_correction(X)
    return problem, mf, X


def test_corrected_matches_hf_at_archive_points():
    problem, mf, X = _mf_pair()
    for x in X:
        mean, std = evaluate_lf_corrected(mf, x)
        truth = four_branch(x)
        assert abs(mean - truth) <= 1e-6 * max(1.0, abs(truth))
        assert std < 1e-4


def test_zero_correction_returns_lf():
    problem = get_problem("four_branch")
    rng = np.random.default_rng(1)
    lf = build_lf(problem, "gp", rng)
    mf = MultifidelityModel(problem.space, problem.hf, lf, correction=None)
    x = np.array([0.3, -0.2])
    mean, std = mf.evaluate_lf_corrected(x)
    assert mean == lf.evaluate({"x1": 0.3, "x2": -0.2})
    assert std == 0.0


def test_biased_lf_corrected_back_to_truth():
    problem = get_problem("four_branch")
    space = problem.space
    biased = make_function_evaluator(
        "fb-plus-one", space, space.lf_indices, lambda v: four_branch(v) + 1.0
    )
    mf = MultifidelityModel(space, problem.hf, biased)
    X = space.sample_underlying(np.random.default_rng(2), 20)
    mf.initialize_correction(X)
    for x in X[:5]:
        mean, _ = mf.evaluate_lf_corrected(x)
        assert mean == pytest.approx(four_branch(x), abs=1e-6)


def test_adapt_appends_and_interpolates():
    problem, mf, _ = _mf_pair(seed=3)
    n0 = mf.correction.n_train
    hf0, lf0 = mf.hf_calls, mf.lf_calls
    x = np.array([1.7, -0.4])
    F = evaluate_hf_and_adapt(mf, x)
    assert F == pytest.approx(four_branch(x), abs=1e-12)
    assert mf.correction.n_train == n0 + 1
    assert mf.hf_calls == hf0 + 1 and mf.lf_calls == lf0 + 1
    mean, _ = evaluate_lf_corrected(mf, x)
    assert mean == pytest.approx(F, abs=1e-6)


def test_memoized_lf_not_double_billed():
    problem, mf, _ = _mf_pair(seed=4)
    lf0 = mf.lf_calls
    x = np.array([0.9, 0.9])
    mf.evaluate_lf_corrected(x)
    assert mf.lf_calls == lf0 + 1
    mf.evaluate_hf_and_adapt(x)  # reuses the memoized cheap value
    assert mf.lf_calls == lf0 + 1
    mf.evaluate_lf_corrected(np.array([0.1, 0.1]))
    assert mf.lf_calls == lf0 + 2


def test_fusion_tightens_at_archive_points():
    problem, mf, X = _mf_pair(seed=5)
    for x in X:
        f_raw = mf.lf.evaluate(problem.space.named_params(x, problem.space.lf_indices))
        truth = four_branch(x)
        corrected, _ = mf.evaluate_lf_corrected(x)
        assert abs(corrected - truth) <= abs(f_raw - truth) + 1e-9


def test_hf_only_through_adapt_path():
    problem, mf, _ = _mf_pair(seed=6)
    hf_counter_before = problem.hf.call_count
    for _ in range(10):
        mf.evaluate_lf_corrected(np.random.default_rng(7).normal(size=2))
    assert problem.hf.call_count == hf_counter_before


def test_train_gp_lf_bills_hf():
    problem = get_problem("rastrigin")
    before = problem.hf.call_count
    ev, surrogate = train_gp_lf(problem.space, problem.hf, 20, np.random.default_rng(8))
    assert problem.hf.call_count == before + 20
    assert surrogate.n_train == 20
    v = ev.evaluate({"x1": 0.0, "x2": 0.0})
    assert math.isfinite(v)


# ------------------------------------------------------------- adapter


def _spawn(args, timeout=30.0):
    return ExternalAdapter(
        [sys.executable, "-m", "mfals.reference_adapter", *args], timeout=timeout
    )


def test_adapter_round_trip():
    with _spawn(["four_branch"]) as adapter:
        assert adapter.inputs == ["x1", "x2"]
        assert external_evaluate(adapter, {"x1": 0.0, "x2": 0.0}) == 3.0
        assert external_evaluate(adapter, {"x1": 3.0, "x2": 3.0}) == pytest.approx(
            3.0 - 6.0 / math.sqrt(2.0)
        )


def test_adapter_as_evaluator():
    with _spawn(["rastrigin"]) as adapter:
        ev = adapter.as_evaluator("remote-rastrigin")
        assert ev.evaluate({"x1": 0.5, "x2": 0.0}) == pytest.approx(9.75)
        assert ev.call_count == 1


def test_adapter_error_passthrough():
    with _spawn(["borehole"]) as adapter:
        with pytest.raises(EvaluationError, match="r > rw"):
            adapter.evaluate(
                {"rw": 0.1, "r": 0.05, "Tu": 1.0, "Hu": 1.0, "Tl": 1.0, "Hl": 0.0,
                 "L": 1.0, "Kw": 1.0}
            )
        # adapter stays usable after a model-level error
        assert adapter.evaluate(
            {"rw": 0.075, "r": 2000.0, "Tu": 89335.0, "Hu": 1050.0, "Tl": 89.55,
             "Hl": 760.0, "L": 1400.0, "Kw": 10950.0}
        ) > 0


def test_adapter_crash_detected():
    adapter = _spawn(["four_branch", "--fail-after", "1"])
    try:
        adapter.evaluate({"x1": 0.0, "x2": 0.0})
        with pytest.raises(AdapterCrashError):
            adapter.evaluate({"x1": 1.0, "x2": 1.0})
    finally:
        adapter.close()


def test_adapter_protocol_violations(tmp_path):
    bad_id = tmp_path / "bad_id.py"
    bad_id.write_text(
        "import json,sys\n"
        'print(json.dumps({"ready": True, "inputs": ["x"]}), flush=True)\n'
        "for line in sys.stdin:\n"
        "    req = json.loads(line)\n"
        '    print(json.dumps({"id": req["id"] + 1, "value": 0.0}), flush=True)\n'
    )
    with ExternalAdapter([sys.executable, str(bad_id)], timeout=30.0) as adapter:
        with pytest.raises(ProtocolError, match="id"):
            adapter.evaluate({"x": 1.0})

    garbled = tmp_path / "garbled.py"
    garbled.write_text(
        "import json,sys\n"
        'print(json.dumps({"ready": True, "inputs": ["x"]}), flush=True)\n'
        "for line in sys.stdin:\n"
        "    print('not json at all', flush=True)\n"
    )
    with ExternalAdapter([sys.executable, str(garbled)], timeout=30.0) as adapter:
        with pytest.raises(ProtocolError, match="unparseable"):
            adapter.evaluate({"x": 1.0})

    no_hello = tmp_path / "no_hello.py"
    no_hello.write_text("print('hello world', flush=True)\nimport time\ntime.sleep(5)\n")
    with pytest.raises(ProtocolError, match="handshake"):
        ExternalAdapter([sys.executable, str(no_hello)], timeout=30.0)


def test_adapter_timeout(tmp_path):
    slow = tmp_path / "slow.py"
    slow.write_text(
        "import json,sys,time\n"
        'print(json.dumps({"ready": True, "inputs": ["x"]}), flush=True)\n'
        "for line in sys.stdin:\n"
        "    time.sleep(30)\n"
    )
    with ExternalAdapter([sys.executable, str(slow)], timeout=0.5) as adapter:
        with pytest.raises(EvaluationError, match="no response"):
            adapter.evaluate({"x": 1.0})

"""Gaussian-process regression with an ARD squared-exponential kernel.

Serves two roles here: the additive correction trained on high-minus-low model
differences, and a frozen surrogate standing in as the cheap model for the
analytic benchmarks. Inputs and outputs are standardized before training and
the prior mean is zero in standardized space, so predictions revert to the
training-output mean far from data. Hyperparameters minimize the negative log
marginal likelihood over log-parameters with analytic gradients; the
multi-start draws come from a fixed seed so refits are deterministic.

Surrogates are value-like: ``update`` returns a new instance and never mutates
the one you pass in (the clamped-variance tally is the one mutable counter).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky, solve_triangular
from scipy.optimize import minimize

__all__ = [
    "GPConditioningError",
    "KernelHyperparameters",
    "GPSurrogate",
    "fit",
    "predict",
    "update",
    "default_refit_every",
    "negative_log_marginal_likelihood",
]

_MULTISTART_SEED = 161803  # fixed so refits reproduce bit for bit
_N_STARTS = 8
_N_STARTS_WARM = 3
_WARM_THRESHOLD = 200  # archives above this refit from the current optimum
_LOG_BOUNDS_SV = (math.log(1e-26), math.log(1e6))
_LOG_BOUNDS_LS = (math.log(1e-3), math.log(1e3))
_START_LO, _START_HI = math.log(1e-2), math.log(1e2)
_DUP_TOL = 1e-12
_JITTER_MAX = 1e-4
_BAD_NLL = 1e25


class GPConditioningError(RuntimeError):
    """Kernel matrix stayed non-positive-definite after jitter escalation."""


@dataclass(frozen=True)
class KernelHyperparameters:
    """Signal variance, per-dimension lengthscales, and diagonal jitter.

    The jitter is relative: the regularized kernel is
    signal_variance * (C + jitter * I), with C the unit-diagonal correlation.
    """

    signal_variance: float
    lengthscales: tuple
    jitter: float = 1e-8

    def __post_init__(self) -> None:
        ls = tuple(float(v) for v in np.atleast_1d(self.lengthscales))
        object.__setattr__(self, "lengthscales", ls)
        if not (self.signal_variance > 0) or not math.isfinite(self.signal_variance):
            raise ValueError("signal_variance must be positive and finite")
        if any(not (v > 0) or not math.isfinite(v) for v in ls):
            raise ValueError("lengthscales must be positive and finite")
        if self.jitter < 0:
            raise ValueError("jitter must be >= 0")


def _correlation(A: np.ndarray, B: np.ndarray, lengthscales) -> np.ndarray:
    """exp(-0.5 * sum_d (a_d - b_d)^2 / ls_d^2) for all row pairs."""
    ls = np.asarray(lengthscales, dtype=float)
    As = A / ls
    Bs = B / ls
    d2 = (As * As).sum(axis=1)[:, None] + (Bs * Bs).sum(axis=1)[None, :] - 2.0 * As @ Bs.T
    np.maximum(d2, 0.0, out=d2)
    return np.exp(-0.5 * d2)


def negative_log_marginal_likelihood(
    inputs, outputs, signal_variance, lengthscales, jitter, with_grad=False
):
    """NLL of the zero-mean GP, optionally with gradients in log-parameters.

    Gradient order: d/d ln(signal_variance), then d/d ln(lengthscale_j) per
    input dimension. A failed factorization returns a large sentinel value
    (and zero gradient) so line searches back away from it.
    """
    X = np.atleast_2d(np.asarray(inputs, dtype=float))
    y = np.asarray(outputs, dtype=float).ravel()
    n, d = X.shape
    ls = np.asarray(lengthscales, dtype=float)
    C = _correlation(X, X, ls)
    K = signal_variance * (C + jitter * np.eye(n))
    try:
        L = cholesky(K, lower=True, check_finite=False)
    except LinAlgError:
        if with_grad:
            return _BAD_NLL, np.zeros(1 + d)
        return _BAD_NLL
    alpha = cho_solve((L, True), y, check_finite=False)
    nll = (
        0.5 * float(y @ alpha)
        + float(np.log(np.diag(L)).sum())
        + 0.5 * n * math.log(2.0 * math.pi)
    )
    if not with_grad:
        return nll
    Kinv = cho_solve((L, True), np.eye(n), check_finite=False)
    W = Kinv - np.outer(alpha, alpha)
    grad = np.empty(1 + d)
    grad[0] = 0.5 * float((W * K).sum())  # dK/d ln sv = K
    M = (0.5 * signal_variance) * (W * C)
    for j in range(d):
        diff = X[:, j][:, None] - X[:, j][None, :]
        grad[1 + j] = float((M * (diff * diff)).sum()) / (ls[j] * ls[j])
    return nll, grad


def _optimize_hypers(Z, ys, jitter, theta_warm=None):
    """Multi-start L-BFGS-B on log-parameters. Returns (log_params, nll).

    With ``theta_warm`` given and a large archive, the search shrinks to the
    warm point plus two seeded random starts under an iteration cap; a full
    optimization on a thousand-point kernel costs minutes, and a refit that
    moved one observation rarely moves the optimum far.
    """
    d = Z.shape[1]
    rng = np.random.default_rng(_MULTISTART_SEED)
    options = {"ftol": 1e-13, "gtol": 1e-8}
    if theta_warm is not None and Z.shape[0] > _WARM_THRESHOLD:
        starts = [np.asarray(theta_warm, dtype=float)]
        n_starts = _N_STARTS_WARM
        options["maxiter"] = 200
    else:
        starts = [np.zeros(1 + d)]
        n_starts = _N_STARTS
    for _ in range(n_starts - 1):
        starts.append(rng.uniform(_START_LO, _START_HI, size=1 + d))
    bounds = [_LOG_BOUNDS_SV] + [_LOG_BOUNDS_LS] * d

    def objective(theta):
        return negative_log_marginal_likelihood(
            Z, ys, math.exp(theta[0]), np.exp(theta[1:]), jitter, with_grad=True
        )

    best_theta, best_nll = None, math.inf
    for theta0 in starts:
        theta0 = np.clip(theta0, [b[0] for b in bounds], [b[1] for b in bounds])
        f0 = objective(theta0)[0]
        if f0 < best_nll:
            best_theta, best_nll = theta0, f0
        res = minimize(
            objective,
            theta0,
            jac=True,
            method="L-BFGS-B",
            bounds=bounds,
            options=options,
        )
        if np.isfinite(res.fun) and res.fun < best_nll:
            best_theta, best_nll = res.x, float(res.fun)
    if best_theta is None or best_nll >= _BAD_NLL:
        raise GPConditioningError("no hyperparameter start produced a usable kernel")
    return np.asarray(best_theta, dtype=float), best_nll


def _factorize(Z, ys, signal_variance, lengthscales, jitter0):
    """Cholesky with multiplicative jitter escalation. Returns (L, alpha, jitter)."""
    n = Z.shape[0]
    C = _correlation(Z, Z, lengthscales)
    jitter = max(jitter0, 1e-12)
    while True:
        try:
            L = cholesky(signal_variance * (C + jitter * np.eye(n)), lower=True, check_finite=False)
            break
        except LinAlgError:
            jitter *= 10.0
            if jitter > _JITTER_MAX * 10.0:
                raise GPConditioningError(
                    f"kernel not positive definite at jitter {jitter / 10.0:.1e}"
                ) from None
    alpha = cho_solve((L, True), ys, check_finite=False)
    return L, alpha, jitter


def _drop_stale_duplicates(X_std):
    """Indices to keep: rows with a later twin (within _DUP_TOL) are dropped."""
    n = X_std.shape[0]
    keep = np.ones(n, dtype=bool)
    for i in range(n - 1):
        d = X_std[i + 1 :] - X_std[i]
        if np.any(np.einsum("ij,ij->i", d, d) < _DUP_TOL * _DUP_TOL):
            keep[i] = False
    return np.flatnonzero(keep)


class GPSurrogate:
    """Trained GP: standardized archive, hyperparameters, Cholesky factor.

    Construct through :func:`fit`; grow through :func:`update`. Attributes
    follow the training representation: ``train_inputs`` / ``train_outputs``
    are standardized, ``raw_inputs`` / ``raw_outputs`` keep original units,
    and ``chol`` / ``alpha`` factor the regularized kernel.
    """

    __slots__ = (
        "raw_inputs",
        "raw_outputs",
        "train_inputs",
        "train_outputs",
        "hyper",
        "chol",
        "alpha",
        "input_mean",
        "input_scale",
        "output_mean",
        "output_scale",
        "clamped_variance_count",
        "appends_since_refit",
        "first_append_pending",
    )

    def __init__(self):  # populated by the builders below
        self.clamped_variance_count = 0
        self.appends_since_refit = 0
        self.first_append_pending = True

    @property
    def n_train(self) -> int:
        return self.raw_inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.raw_inputs.shape[1]

    @property
    def prior_variance(self) -> float:
        """Prior predictive variance in original output units."""
        return self.output_scale**2 * self.hyper.signal_variance

    def predict(self, x):
        """Posterior mean and std at x, in original output units.

        x may be a single d-vector (scalars returned) or an m x d matrix
        (arrays returned). No jitter is added to the test diagonal, so the
        variance tops out at the prior variance.
        """
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        Z = (np.atleast_2d(x) - self.input_mean) / self.input_scale
        sv = self.hyper.signal_variance
        Kst = sv * _correlation(self.train_inputs, Z, self.hyper.lengthscales)
        mean_std = Kst.T @ self.alpha
        V = solve_triangular(self.chol, Kst, lower=True, check_finite=False)
        var = sv - np.einsum("ij,ij->j", V, V)
        neg = var < 0.0
        if np.any(neg):
            self.clamped_variance_count += int(neg.sum())
            var = np.where(neg, 0.0, var)
        mean = self.output_mean + self.output_scale * mean_std
        std = self.output_scale * np.sqrt(var)
        if single:
            return float(mean[0]), float(std[0])
        return mean, std

    def nll(self) -> float:
        """NLL of the standardized archive at the current hyperparameters."""
        return negative_log_marginal_likelihood(
            self.train_inputs,
            self.train_outputs,
            self.hyper.signal_variance,
            self.hyper.lengthscales,
            self.hyper.jitter,
        )

    def to_dict(self) -> dict:
        """JSON-ready archive: raw data, hyperparameters, scalers, counters."""
        return {
            "inputs": self.raw_inputs.tolist(),
            "outputs": self.raw_outputs.tolist(),
            "signal_variance": self.hyper.signal_variance,
            "lengthscales": list(self.hyper.lengthscales),
            "jitter": self.hyper.jitter,
            "input_mean": self.input_mean.tolist(),
            "input_scale": self.input_scale.tolist(),
            "output_mean": self.output_mean,
            "output_scale": self.output_scale,
            "appends_since_refit": self.appends_since_refit,
            "first_append_pending": self.first_append_pending,
        }

    @classmethod
    def from_dict(cls, blob: dict) -> "GPSurrogate":
        gp = cls()
        gp.raw_inputs = np.asarray(blob["inputs"], dtype=float)
        gp.raw_outputs = np.asarray(blob["outputs"], dtype=float)
        gp.input_mean = np.asarray(blob["input_mean"], dtype=float)
        gp.input_scale = np.asarray(blob["input_scale"], dtype=float)
        gp.output_mean = float(blob["output_mean"])
        gp.output_scale = float(blob["output_scale"])
        gp.train_inputs = (gp.raw_inputs - gp.input_mean) / gp.input_scale
        gp.train_outputs = (gp.raw_outputs - gp.output_mean) / gp.output_scale
        sv = float(blob["signal_variance"])
        ls = tuple(blob["lengthscales"])
        L, alpha, jit = _factorize(gp.train_inputs, gp.train_outputs, sv, ls, blob["jitter"])
        gp.hyper = KernelHyperparameters(sv, ls, jit)
        gp.chol = L
        gp.alpha = alpha
        gp.appends_since_refit = int(blob["appends_since_refit"])
        gp.first_append_pending = bool(blob["first_append_pending"])
        return gp


def _build(raw_X, raw_y, input_mean, input_scale, output_mean, output_scale, sv, ls, jitter0):
    gp = GPSurrogate()
    gp.raw_inputs = raw_X
    gp.raw_outputs = raw_y
    gp.input_mean = input_mean
    gp.input_scale = input_scale
    gp.output_mean = output_mean
    gp.output_scale = output_scale
    gp.train_inputs = (raw_X - input_mean) / input_scale
    gp.train_outputs = (raw_y - output_mean) / output_scale
    L, alpha, jit = _factorize(gp.train_inputs, gp.train_outputs, sv, ls, jitter0)
    gp.hyper = KernelHyperparameters(sv, tuple(np.atleast_1d(ls)), jit)
    gp.chol = L
    gp.alpha = alpha
    return gp


def _scalers(X, y):
    in_mean = X.mean(axis=0)
    in_scale = X.std(axis=0)
    in_scale[in_scale == 0.0] = 1.0
    out_mean = float(y.mean())
    out_scale = float(y.std())
    if out_scale == 0.0:
        out_scale = 1.0
    return in_mean, in_scale, out_mean, out_scale


def fit(inputs, outputs, jitter=1e-8, hyper=None, standardize=True, hyper_start=None):
    """Train a surrogate on (inputs, outputs).

    Duplicate rows (within 1e-12 after standardization) are dropped keeping
    the latest output. With ``hyper`` given, optimization is skipped and the
    supplied hyperparameters are used as-is; with ``standardize=False`` the
    affine maps are identities (useful when hyperparameters refer to raw
    coordinates). ``hyper_start`` warm-starts the optimization on large
    archives (see _optimize_hypers) without pinning the result.
    """
    X = np.atleast_2d(np.asarray(inputs, dtype=float))
    y = np.asarray(outputs, dtype=float).ravel()
    if X.shape[0] != y.shape[0]:
        raise ValueError("inputs and outputs disagree on sample count")
    if not np.all(np.isfinite(X)) or not np.all(np.isfinite(y)):
        raise ValueError("training data must be finite")
    if X.shape[0] >= 2:
        im, isc, _, _ = _scalers(X, y)
        keep = _drop_stale_duplicates((X - im) / isc)
        X, y = X[keep], y[keep]
    if X.shape[0] < 2:
        raise ValueError("need at least 2 distinct training points")

    if standardize:
        in_mean, in_scale, out_mean, out_scale = _scalers(X, y)
    else:
        in_mean = np.zeros(X.shape[1])
        in_scale = np.ones(X.shape[1])
        out_mean, out_scale = 0.0, 1.0

    if hyper is not None:
        gp = _build(
            X, y, in_mean, in_scale, out_mean, out_scale,
            hyper.signal_variance, hyper.lengthscales, hyper.jitter,
        )
        # pinned hyperparameters: do not force a re-optimization on the first
        # append, which would silently discard them
        gp.first_append_pending = False
        return gp
    Z = (X - in_mean) / in_scale
    ys = (y - out_mean) / out_scale
    theta_warm = None
    if hyper_start is not None:
        theta_warm = np.concatenate(
            ([math.log(hyper_start.signal_variance)], np.log(hyper_start.lengthscales))
        )
    theta, _ = _optimize_hypers(Z, ys, jitter, theta_warm=theta_warm)
    return _build(
        X, y, in_mean, in_scale, out_mean, out_scale,
        math.exp(theta[0]), np.exp(theta[1:]), jitter,
    )


def predict(gp: GPSurrogate, x):
    return gp.predict(x)


def default_refit_every(n_train: int) -> int:
    """Re-optimization cadence: every append up to 200 points, then every 10th."""
    return 1 if n_train <= 200 else 10


def update(gp: GPSurrogate, x_new, y_new, refit_every=None) -> GPSurrogate:
    """Add one observation, returning a new surrogate.

    Between re-optimizations the Cholesky factor grows by a rank-1 append and
    scalers stay frozen. A full refit (fresh scalers, fresh multi-start) runs
    on the first append after a fit and every ``refit_every`` appends
    thereafter. A point duplicating an archived input (within 1e-12
    standardized) replaces that entry's output instead of growing the archive.
    """
    x_new = np.asarray(x_new, dtype=float).ravel()
    if x_new.shape[0] != gp.dim:
        raise ValueError("dimension mismatch")
    y_val = float(y_new)
    if not np.all(np.isfinite(x_new)) or not math.isfinite(y_val):
        raise ValueError("update data must be finite")

    z_new = (x_new - gp.input_mean) / gp.input_scale
    d = gp.train_inputs - z_new
    dist2 = np.einsum("ij,ij->i", d, d)
    dup = int(np.argmin(dist2)) if dist2.size and dist2.min() < _DUP_TOL**2 else -1

    if dup >= 0:
        raw_X = gp.raw_inputs.copy()
        raw_y = gp.raw_outputs.copy()
        raw_y[dup] = y_val
    else:
        raw_X = np.vstack([gp.raw_inputs, x_new])
        raw_y = np.append(gp.raw_outputs, y_val)

    if refit_every is None:
        refit_every = default_refit_every(raw_X.shape[0])
    count = gp.appends_since_refit + 1
    if gp.first_append_pending or count >= refit_every:
        fresh = fit(raw_X, raw_y, jitter=min(gp.hyper.jitter, 1e-8), hyper_start=gp.hyper)
        fresh.appends_since_refit = 0
        fresh.first_append_pending = False
        return fresh

    # rank-1 Cholesky append under frozen scalers and hyperparameters
    out = GPSurrogate()
    out.raw_inputs = raw_X
    out.raw_outputs = raw_y
    out.input_mean = gp.input_mean
    out.input_scale = gp.input_scale
    out.output_mean = gp.output_mean
    out.output_scale = gp.output_scale
    out.hyper = gp.hyper
    out.train_inputs = (raw_X - gp.input_mean) / gp.input_scale
    out.train_outputs = (raw_y - gp.output_mean) / gp.output_scale
    if dup >= 0:
        out.chol = gp.chol  # kernel unchanged; only the output vector moved
        out.alpha = cho_solve((gp.chol, True), out.train_outputs, check_finite=False)
    else:
        sv = gp.hyper.signal_variance
        k_vec = (sv * _correlation(gp.train_inputs, z_new[None, :], gp.hyper.lengthscales)).ravel()
        k_ss = sv * (1.0 + gp.hyper.jitter)
        w = solve_triangular(gp.chol, k_vec, lower=True, check_finite=False)
        d2 = k_ss - float(w @ w)
        if d2 < sv * gp.hyper.jitter * 1e-3:
            # appended point nearly dependent on the archive: refactor whole
            L, alpha, jit = _factorize(
                out.train_inputs, out.train_outputs, sv, gp.hyper.lengthscales, gp.hyper.jitter
            )
            out.hyper = KernelHyperparameters(sv, gp.hyper.lengthscales, jit)
            out.chol = L
            out.alpha = alpha
        else:
            n = gp.n_train
            L = np.zeros((n + 1, n + 1))
            L[:n, :n] = gp.chol
            L[n, :n] = w
            L[n, n] = math.sqrt(d2)
            out.chol = L
            out.alpha = cho_solve((L, True), out.train_outputs, check_finite=False)
    out.appends_since_refit = count
    out.first_append_pending = False
    return out

"""Comparators: GP BO on the summed objective, ParEGO, random search, and post-hoc stepwise selection."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize

from .acquisition import (
    Problem,
    Record,
    RunHistory,
    best_candidate,
    evaluate_initial,
    expected_improvement,
    initial_design,
    try_evaluate,
)
from .core import RunConfig, normalize, sample_many
from .diffgraph import cholesky_jitter

SQRT5 = math.sqrt(5.0)

LOG_ELL_BOUNDS = (math.log(1e-2), math.log(1e2))
LOG_SF2_BOUNDS = (math.log(1e-3), math.log(1e2))
LOG_SN2_BOUNDS = (math.log(1e-8), math.log(1.0))


def matern52_ard(x, x2, ell, sf2: float) -> float:
    """``σ_f²(1 + √5 r + 5r²/3) exp(-√5 r)`` with ``r² = Σ (x_d - x'_d)² / ℓ_d²``."""
    diff = (np.asarray(x, dtype=np.float64) - np.asarray(x2, dtype=np.float64)) / np.asarray(ell, dtype=np.float64)
    r = math.sqrt(float(diff @ diff))
    return sf2 * (1.0 + SQRT5 * r + 5.0 * r * r / 3.0) * math.exp(-SQRT5 * r)


def _sqdist_parts(A: np.ndarray, B: np.ndarray, ell: np.ndarray) -> np.ndarray:
    """Per-dimension scaled squared differences, shape (d, n, m)."""
    diff = (A[:, None, :] - B[None, :, :]) / ell
    return np.moveaxis(diff * diff, 2, 0)


def matern52_matrix(A: np.ndarray, B: np.ndarray, ell: np.ndarray, sf2: float) -> np.ndarray:
    r = np.sqrt(np.maximum(_sqdist_parts(A, B, ell).sum(axis=0), 0.0))
    return sf2 * (1.0 + SQRT5 * r + 5.0 / 3.0 * r * r) * np.exp(-SQRT5 * r)


@dataclass
class GpModel:
    """Exact GP posterior with a Matérn-5/2 ARD kernel on normalized inputs."""

    ell: np.ndarray
    sf2: float
    sn2: float
    X: np.ndarray
    y: np.ndarray
    chol: np.ndarray
    alpha: np.ndarray
    y_mean: float = 0.0
    y_sd: float = 1.0

    @classmethod
    def build(cls, X, y, ell, sf2, sn2, y_mean=0.0, y_sd=1.0) -> "GpModel":
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        K = matern52_matrix(X, X, ell, sf2) + sn2 * np.eye(len(X))
        L, _ = cholesky_jitter(K)
        alpha = cho_solve((L, True), y)
        return cls(np.asarray(ell, dtype=np.float64), sf2, sn2, X, y, L, alpha, y_mean, y_sd)

    def predict(self, Xs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Latent mean and variance in the model's (normalized) target units."""
        Ks = matern52_matrix(np.atleast_2d(Xs), self.X, self.ell, self.sf2)
        mu = Ks @ self.alpha
        v = solve_triangular(self.chol, Ks.T, lower=True)
        var = np.maximum(self.sf2 - np.sum(v * v, axis=0), 0.0)
        return mu, var


def gp_log_marginal(theta: np.ndarray, X: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Log evidence and its gradient in ``(log ℓ_1..ℓ_d, log σ_f², log σ_n²)``."""
    d = X.shape[1]
    ell = np.exp(theta[:d])
    sf2 = math.exp(theta[d])
    sn2 = math.exp(theta[d + 1])
    N = len(y)
    parts = _sqdist_parts(X, X, ell)
    r = np.sqrt(np.maximum(parts.sum(axis=0), 0.0))
    e = np.exp(-SQRT5 * r)
    Kf = sf2 * (1.0 + SQRT5 * r + 5.0 / 3.0 * r * r) * e
    K = Kf + sn2 * np.eye(N)
    L, _ = cholesky_jitter(K)
    alpha = cho_solve((L, True), y)
    lml = -0.5 * y @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * N * math.log(2 * math.pi)
    W = np.outer(alpha, alpha) - cho_solve((L, True), np.eye(N))
    # dk/dlog ℓ_d = σ_f² (5/3)(1 + √5 r) e^{-√5 r} (x_d - x'_d)² / ℓ_d²
    common = sf2 * (5.0 / 3.0) * (1.0 + SQRT5 * r) * e
    grad = np.empty(d + 2)
    for j in range(d):
        grad[j] = 0.5 * np.sum(W * (common * parts[j]))
    grad[d] = 0.5 * np.sum(W * Kf)
    grad[d + 1] = 0.5 * sn2 * np.trace(W)
    return float(lml), grad


def _bounds(d: int) -> list[tuple[float, float]]:
    return [LOG_ELL_BOUNDS] * d + [LOG_SF2_BOUNDS, LOG_SN2_BOUNDS]


def gp_fit(X, y, rng: np.random.Generator | None = None, restarts: int = 5, maxiter: int = 200,
           theta0: np.ndarray | None = None) -> GpModel:
    """Empirical-Bayes fit: multi-start L-BFGS-B on the log evidence.

    Targets are standardized internally.  The first start is ``theta0`` (or a
    fixed default), the rest are uniform in the hyperparameter box.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(y) < 2:
        raise ValueError("gp_fit needs at least two observations")
    rng = rng or np.random.default_rng(0)
    y_mean = float(y.mean())
    y_sd = max(float(y.std()), 1e-8)
    yn = (y - y_mean) / y_sd
    d = X.shape[1]
    bounds = _bounds(d)
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    default = np.concatenate([np.full(d, math.log(0.5)), [0.0, math.log(1e-2)]])
    starts = [default if theta0 is None else np.clip(theta0, lo, hi)]
    starts += [rng.uniform(lo, hi) for _ in range(restarts - 1)]

    def neg(theta):
        try:
            v, g = gp_log_marginal(theta, X, yn)
        except np.linalg.LinAlgError:
            return 1e25, np.zeros_like(theta)
        return -v, -g

    best_theta, best_val = starts[0], np.inf
    for s in starts:
        res = minimize(neg, s, jac=True, method="L-BFGS-B", bounds=bounds, options={"maxiter": maxiter})
        if res.fun < best_val:
            best_val, best_theta = float(res.fun), res.x
    return GpModel.build(X, yn, np.exp(best_theta[:d]), math.exp(best_theta[d]), math.exp(best_theta[d + 1]),
                         y_mean, y_sd)


def _theta_of(model: GpModel) -> np.ndarray:
    return np.concatenate([np.log(model.ell), [math.log(model.sf2), math.log(model.sn2)]])


# --------------------------------------------------------------------------- #
# single-objective EI loop shared by the GP baselines


def _gp_loop(problem: Problem, cfg: RunConfig, name: str, targets, thetas: Iterator | None = None,
             restarts: int = 5, maxiter: int = 200) -> RunHistory:
    space = problem.space
    history = RunHistory(name, space, problem.T)
    evaluate_initial(problem, initial_design(space, cfg.n_init, cfg.seed), history)
    rng = np.random.default_rng([cfg.seed, 4])
    prev = None
    for it in range(1, cfg.n_iters + 1):
        t0 = time.perf_counter()
        theta = next(thetas) if thetas is not None else None
        f = targets(history.Y, theta)
        Xn = normalize(space, history.X)
        if len(f) >= 2:
            model = gp_fit(Xn, f, rng, restarts, maxiter, prev)
            prev = _theta_of(model)
            cand = sample_many(space, cfg.candidate_pool, rng)
            mu, var = model.predict(normalize(space, cand))
            ei = expected_improvement(mu, var, float(model.y.max()))
            x = cand[best_candidate(ei)]
        else:
            x = sample_many(space, 1, rng)[0]
        y = try_evaluate(problem, x, it, history)
        if y is None:
            continue
        history.add(Record(it, x.copy(), y, probs=theta, seconds=time.perf_counter() - t0))
    return history


def gp_bo_run(problem: Problem, cfg: RunConfig, restarts: int = 5, maxiter: int = 200) -> RunHistory:
    """Standard EI BO on ``f_sum(x) = Σ_t y_t(x)``; all per-step scores are kept."""
    return _gp_loop(problem, cfg, "gp", lambda Y, _: Y.sum(axis=1), restarts=restarts, maxiter=maxiter)


def rescale_columns(Y: np.ndarray) -> np.ndarray:
    """Per-column min-max rescaling to [0, 1]; constant columns map to 0."""
    Y = np.asarray(Y, dtype=np.float64)
    lo = Y.min(axis=0)
    span = Y.max(axis=0) - lo
    return np.where(span > 0, (Y - lo) / np.where(span > 0, span, 1.0), 0.0)


def parego_scalarize(Y_hat: np.ndarray, theta: Sequence[float], rho: float = 0.05) -> np.ndarray:
    """``max_t θ_t Ŷ_t + 0.05 Σ_t θ_t Ŷ_t`` per row of already-rescaled scores."""
    theta = np.asarray(theta, dtype=np.float64)
    if np.any(theta < 0) or abs(theta.sum() - 1.0) > 1e-9:
        raise ValueError("theta must lie on the probability simplex")
    prod = np.atleast_2d(Y_hat) * theta
    return prod.max(axis=1) + rho * prod.sum(axis=1)


def simplex_weights(T: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Endless uniform draws on the simplex via normalized exponentials."""
    while True:
        e = rng.exponential(size=T)
        yield e / e.sum()


def parego_run(problem: Problem, cfg: RunConfig, thetas: Iterator | None = None,
               restarts: int = 5, maxiter: int = 200) -> RunHistory:
    """ParEGO: a fresh random scalarization each iteration, then GP + EI.

    The weight vector used at each iteration is stored in the record's
    ``probs`` slot.  ``thetas`` may inject a fixed weight sequence.
    """
    thetas = thetas if thetas is not None else simplex_weights(problem.T, np.random.default_rng([cfg.seed, 5]))
    return _gp_loop(problem, cfg, "parego", lambda Y, th: parego_scalarize(rescale_columns(Y), th),
                    thetas=iter(thetas), restarts=restarts, maxiter=maxiter)


def random_run(problem: Problem, cfg: RunConfig) -> RunHistory:
    space = problem.space
    history = RunHistory("random", space, problem.T)
    evaluate_initial(problem, initial_design(space, cfg.n_init, cfg.seed), history)
    rng = np.random.default_rng([cfg.seed, 6])
    for it in range(1, cfg.n_iters + 1):
        t0 = time.perf_counter()
        x = sample_many(space, 1, rng)[0]
        y = try_evaluate(problem, x, it, history)
        if y is not None:
            history.add(Record(it, x, y, seconds=time.perf_counter() - t0))
    return history


def posthoc_stepwise(history: RunHistory) -> list[tuple[np.ndarray, float]]:
    """For each step, the acquired point with the best score at that step."""
    if not history.records:
        raise ValueError("empty history")
    return history.incumbent_points()

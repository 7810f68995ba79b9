"""Oracle self-test suite behind ``smsdkl check``.

Each check compares the library against an independent computation (dense
inverses, finite differences, Monte Carlo) on seeded random instances.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np
from scipy.stats import multivariate_normal

from . import diffgraph as dg
from . import feature_net as fn
from . import surrogate as sg
from .acquisition import StepProposal, expected_improvement, hedge_select


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def _random_blr(rng):
    N = int(rng.integers(1, 21))
    D = int(rng.integers(1, 21))
    G = rng.standard_normal((N, D))
    y = rng.standard_normal(N)
    beta = float(np.exp(rng.uniform(-2, 2)))
    lam = float(np.exp(rng.uniform(-2, 2)))
    return G, y, beta, lam


def check_primal_dual(n: int = 1000, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        G, y, beta, lam = _random_blr(rng)
        p = sg.log_marginal_primal(G, y, beta, lam)
        d = sg.log_marginal_dual(G, y, beta, lam)
        worst = max(worst, abs(p - d) / max(abs(p), abs(d), 1e-300))
    return CheckResult("primal_dual", bool(worst < 1e-8), f"max relative difference {worst:.2e} over {n} instances")


def check_against_density(n: int = 200, seed: int = 1) -> CheckResult:
    """log_marginal against scipy's multivariate normal density."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        G, y, beta, lam = _random_blr(rng)
        ref = multivariate_normal(np.zeros(len(y)), G @ G.T / lam + np.eye(len(y)) / beta).logpdf(y)
        worst = max(worst, abs(sg.log_marginal(G, y, beta, lam) - ref) / max(abs(ref), 1e-300))
    return CheckResult("density_oracle", bool(worst < 1e-8), f"max relative difference {worst:.2e} over {n} instances")


def check_posterior(n: int = 1000, seed: int = 2) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        G, y, beta, lam = _random_blr(rng)
        g = rng.standard_normal(G.shape[1])
        # weight posterior covariance (λI + βGᵀG)⁻¹ by dense inversion
        cov = np.linalg.inv(lam * np.eye(G.shape[1]) + beta * G.T @ G)
        m_ref = beta * cov @ G.T @ y
        post = sg.posterior(G, y, beta, lam)
        mu, s2 = sg.predict(post, g)
        for a, b in ((post.m_w, m_ref), (mu, g @ m_ref), (s2, g @ cov @ g)):
            a, b = np.atleast_1d(a), np.atleast_1d(b)
            worst = max(worst, float(np.max(np.abs(a - b) / np.maximum(np.abs(b), 1.0))))
    return CheckResult("posterior_oracle", bool(worst < 1e-8), f"max error {worst:.2e} over {n} instances")


def tiny_problem(seed: int, H: int = 4, W: int = 4, N: int = 3, T: int = 3, I: int = 4, d: int = 2,
                 gain: float | None = None):
    """Small random network and data for gradient and invariance checks.

    With ``gain`` set, weights are redrawn as ``U(±gain/√fan_in)``, set-network
    biases as ``U(0.2, 1)`` and other biases as ``N(0, 0.5²)``: a generic point
    with mostly live ReLUs, away from kinks, where gradients reaching the
    recurrent encoder are not vanishingly small.
    """
    rng = np.random.default_rng(seed)
    obs = rng.standard_normal((I, T, d))
    labels = (rng.random((I, T)) < 0.5).astype(float)
    steps = np.concatenate([obs, labels[..., None]], axis=2)
    lengths = rng.integers(1, T + 1, size=I)
    lengths[0] = T
    shape = fn.NetShape(d + 1, 2, hidden=H, set_width=W, head_width=W, embed_dim=2, feature_dim=W)
    params = fn.init_params(shape, rng)
    sg.add_noise_params(params.store, T)
    params.store["blr.log_beta"][:] = rng.uniform(-0.5, 0.5, T)
    params.store["blr.log_lambda"][:] = rng.uniform(-0.5, 0.5, T)
    if gain is not None:
        for name, v in params.store.params.items():
            if name.startswith("blr."):
                continue
            if name.startswith("set.b"):
                v[...] = rng.uniform(0.2, 1.0, v.shape)
            elif ".b" in name:
                v[...] = rng.normal(0.0, 0.5, v.shape)
            else:
                v[...] = gain * rng.uniform(-1.0, 1.0, v.shape) / np.sqrt(v.shape[0])
    X = rng.random((N, 2))
    Y = rng.standard_normal((N, T))
    return params, sg.SurrogateData(steps, lengths, X, Y)


def check_gradients(seeds: int = 20, tol: float = 1e-4) -> CheckResult:
    """Backprop through encoder, set network, head and evidence vs central differences.

    Errors are measured per parameter tensor; single coordinates far below
    the tensor's gradient scale sit under finite-difference resolution.
    """
    worst, name = 0.0, ""
    for s in range(seeds):
        params, data = tiny_problem(s, gain=2.0)
        f: Callable = lambda p, data=data: sg.multitask_objective(p, data, range(1, data.T + 1))
        for k, err in dg.grad_check_blocks(f, params.store, eps=1e-5).items():
            if err > worst:
                worst, name = err, k
    return CheckResult("gradient_check", bool(worst < tol),
                       f"max per-tensor relative error {worst:.2e} ({name}) over {seeds} seeds")


def check_permutation(n: int = 100, seed: int = 3) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k in range(n):
        I = int(rng.integers(2, 12))
        params, _ = tiny_problem(k, H=4, W=4, I=I)
        H = rng.standard_normal((I, 4))
        perm = rng.permutation(I)
        worst = max(worst, float(np.max(np.abs(fn.encode_set(params, H) - fn.encode_set(params, H[perm])))))
    return CheckResult("permutation_invariance", bool(worst < 1e-12), f"max deviation {worst:.2e} over {n} triples")


def check_ei(n: int = 50, samples: int = 1_000_000, seed: int = 4) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        mu, sd = rng.normal(), math.exp(rng.uniform(-2, 1))
        best = mu + sd * rng.uniform(-2, 2)
        draws = mu + sd * rng.standard_normal(samples)
        gain = np.maximum(draws - best, 0.0)
        se = gain.std() / math.sqrt(samples)
        diff = abs(float(expected_improvement(mu, sd * sd, best)) - gain.mean())
        worst = max(worst, diff / se if se > 0 else (0.0 if diff < 1e-12 else np.inf))
    edge = (float(expected_improvement(1.0, 0.0, 0.5)) == 0.5
            and float(expected_improvement(0.5, 0.0, 1.0)) == 0.0)
    return CheckResult("expected_improvement", bool(worst < 3 and edge),
                       f"max deviation {worst:.2f} MC standard errors; sigma=0 edges exact: {edge}")


def check_hedge(draws: int = 100_000, seed: int = 5) -> CheckResult:
    rng = np.random.default_rng(seed)
    values = [0.1, 0.0, 0.5, 1.2, 0.2]
    props = [StepProposal(t + 1, np.zeros(1), v) for t, v in enumerate(values)]
    counts = np.zeros(len(values))
    probs = None
    for _ in range(draws):
        chosen, probs = hedge_select(props, rng)
        counts[chosen.t - 1] += 1
    expected = np.asarray(values) / sum(values)
    bound = 5 * np.sqrt(draws * expected * (1 - expected))
    ok = (abs(probs.sum() - 1) < 1e-12 and np.all(probs >= 0)
          and np.all(np.abs(counts - draws * expected) <= np.maximum(bound, 0)))
    return CheckResult("hedge_policy", bool(ok), f"counts {counts.astype(int).tolist()} vs expected "
                       f"{np.round(draws * expected).astype(int).tolist()}")


def lml_flops(N: int, D: int, seed: int = 0) -> int:
    rng = np.random.default_rng(seed)
    G = rng.standard_normal((N, D))
    y = rng.standard_normal(N)
    with dg.count_flops() as box:
        sg.log_marginal(G, y, 1.0, 1.0)
    return box[0]


def check_complexity() -> CheckResult:
    dispatch = sg.uses_primal(200, 32) and not sg.uses_primal(32, 200) and not sg.uses_primal(20, 20)
    tall, wide = lml_flops(200, 32), lml_flops(32, 200)
    model = 200 * 32**2
    ratios = (tall / model, wide / model)
    # both shapes should cost about max(N, D) * min(N, D)^2
    ok = dispatch and all(0.5 <= r <= 2.0 for r in ratios) and 0.5 <= tall / wide <= 2.0
    return CheckResult("form_switching", bool(ok), f"dispatch ok: {dispatch}; counts {tall} (200x32) and {wide} "
                       f"(32x200), ratio {tall / wide:.2f}")


CHECKS: dict[str, Callable[[], CheckResult]] = {
    "primal_dual": check_primal_dual,
    "density_oracle": check_against_density,
    "posterior_oracle": check_posterior,
    "gradient_check": check_gradients,
    "permutation_invariance": check_permutation,
    "expected_improvement": check_ei,
    "hedge_policy": check_hedge,
    "form_switching": check_complexity,
}


def run_checks(names=None) -> list[CheckResult]:
    out = []
    for name in names or CHECKS:
        if name not in CHECKS:
            raise KeyError(f"unknown check {name!r}; choose from {sorted(CHECKS)}")
        t0 = time.perf_counter()
        res = CHECKS[name]()
        res.seconds = time.perf_counter() - t0
        out.append(res)
    return out

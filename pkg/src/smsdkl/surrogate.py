"""Per-step Bayesian linear regression on learned features, and its training.

For step ``t`` with feature matrix ``G`` (N×D) and targets ``y``::

    K_w   = I + (β/λ) GᵀG
    m_w   = (β/λ) K_w⁻¹ Gᵀ y
    mu    = m_wᵀ g
    var   = (1/λ) gᵀ K_w⁻¹ g

The weight posterior covariance is ``(λ K_w)⁻¹``.  The log evidence is
computed in D-space (primal) when N > D and in N-space (dual) otherwise; the
two agree to rounding.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from . import diffgraph as dg
from . import feature_net as fn
from .core import HyperparamSpace, RunConfig, SequenceDataset, normalize
from .diffgraph import Node, NotPositiveDefiniteError, ParamStore

log = logging.getLogger(__name__)

LOG_2PI = math.log(2 * math.pi)
SD_FLOOR = 1e-8
# box for the noise/prior log-precisions; noise-free targets otherwise drive β
# upward until K_w is numerically singular
LOG_BETA_BOUNDS = (-10.0, 10.0)
LOG_LAMBDA_BOUNDS = (-6.0, 6.0)


class TrainingError(RuntimeError):
    """Marginal-likelihood training produced non-finite values twice in a row."""


class StepFactorizationError(NotPositiveDefiniteError):
    def __init__(self, t: int, cause: Exception):
        self.t = t
        super().__init__(f"step t={t}: {cause}")


# --------------------------------------------------------------------------- #
# closed-form posterior and predictive


@dataclass
class BlrPosterior:
    m_w: np.ndarray
    K_w: np.ndarray
    chol: np.ndarray
    beta: float
    lam: float


def posterior(G: np.ndarray, y: np.ndarray, beta: float, lam: float) -> BlrPosterior:
    G = np.asarray(G, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if beta <= 0 or lam <= 0:
        raise ValueError("beta and lambda must be positive")
    D = G.shape[1]
    if G.shape[0] == 0:
        eye = np.eye(D)
        return BlrPosterior(np.zeros(D), eye, eye.copy(), beta, lam)
    r = beta / lam
    K = np.eye(D) + r * (G.T @ G)
    L, _ = dg.cholesky_jitter(K)
    m = cho_solve((L, True), r * (G.T @ y))
    return BlrPosterior(m, K, L, beta, lam)


def predict(post: BlrPosterior, g: np.ndarray) -> tuple:
    """Predictive mean and variance at one feature vector or at each row of a matrix."""
    g = np.asarray(g, dtype=np.float64)
    mu = g @ post.m_w
    w = solve_triangular(post.chol, g.T, lower=True)
    sigma2 = np.sum(w * w, axis=0) / post.lam
    if g.ndim == 1:
        return float(mu), float(sigma2)
    return mu, sigma2


# --------------------------------------------------------------------------- #
# log marginal likelihood


def uses_primal(N: int, D: int) -> bool:
    return N > D


def lml_primal_node(G: Node, y: np.ndarray, log_beta: Node, log_lam: Node) -> Node:
    N, D = G.shape
    y = np.asarray(y, dtype=np.float64)
    ratio = dg.exp(log_beta - log_lam)
    K = ratio * (G.T @ G) + np.eye(D)
    b = G.T @ y
    quad = dg.quadform_spd(K, b)
    # β²/(2λ) · yᵀG K⁻¹ Gᵀy
    coef = 0.5 * dg.exp(2.0 * log_beta - log_lam)
    return (
        -0.5 * N * LOG_2PI
        + 0.5 * N * log_beta
        - 0.5 * dg.exp(log_beta) * float(y @ y)
        + coef * quad
        - 0.5 * dg.logdet_spd(K)
    )


def lml_dual_node(G: Node, y: np.ndarray, log_beta: Node, log_lam: Node) -> Node:
    N = G.shape[0]
    C = dg.exp(-log_lam) * (G @ G.T) + dg.exp(-log_beta) * np.eye(N)
    return -0.5 * N * LOG_2PI - 0.5 * dg.logdet_spd(C) - 0.5 * dg.quadform_spd(C, np.asarray(y, dtype=np.float64))


def lml_node(G: Node, y: np.ndarray, log_beta: Node, log_lam: Node) -> Node:
    N, D = G.shape
    if uses_primal(N, D):
        return lml_primal_node(G, y, log_beta, log_lam)
    return lml_dual_node(G, y, log_beta, log_lam)


def _as_graph(G, beta, lam):
    G = np.asarray(G, dtype=np.float64)
    if G.shape[0] < 1:
        raise ValueError("log marginal likelihood needs N >= 1")
    if beta <= 0 or lam <= 0:
        raise ValueError("beta and lambda must be positive")
    return dg.constant(G), dg.constant(math.log(beta)), dg.constant(math.log(lam))


def log_marginal_primal(G, y, beta: float, lam: float) -> float:
    Gn, lb, ll = _as_graph(G, beta, lam)
    return float(lml_primal_node(Gn, y, lb, ll).value)


def log_marginal_dual(G, y, beta: float, lam: float) -> float:
    Gn, lb, ll = _as_graph(G, beta, lam)
    return float(lml_dual_node(Gn, y, lb, ll).value)


def log_marginal(G, y, beta: float, lam: float) -> float:
    Gn, lb, ll = _as_graph(G, beta, lam)
    return float(lml_node(Gn, y, lb, ll).value)


# --------------------------------------------------------------------------- #
# multi-task objective


@dataclass
class SurrogateData:
    """Everything the objective needs besides the parameters.

    ``Y`` holds raw scores, one column per step; normalization statistics are
    recomputed whenever the data object is rebuilt.
    """

    steps: np.ndarray
    lengths: np.ndarray
    X_norm: np.ndarray
    Y: np.ndarray
    y_mean: np.ndarray = field(init=False)
    y_sd: np.ndarray = field(init=False)
    Y_norm: np.ndarray = field(init=False)

    def __post_init__(self):
        self.Y = np.atleast_2d(np.asarray(self.Y, dtype=np.float64))
        if self.Y.shape[0] != self.X_norm.shape[0]:
            raise ValueError("X and Y must have the same number of rows")
        self.y_mean = self.Y.mean(axis=0)
        self.y_sd = np.maximum(self.Y.std(axis=0), SD_FLOOR)
        self.Y_norm = (self.Y - self.y_mean) / self.y_sd

    @property
    def T(self) -> int:
        return self.Y.shape[1]


def add_noise_params(store: ParamStore, T: int, share: bool = False) -> None:
    """log β and log λ, initialised at 0 (β = λ = 1), per step unless shared."""
    n = 1 if share else T
    store.add("blr.log_beta", np.zeros(n))
    store.add("blr.log_lambda", np.zeros(n))


def _noise_index(p, t: int) -> int:
    return 0 if p["blr.log_beta"].shape[0] == 1 else t - 1


def multitask_objective(
    p: dict[str, Node],
    data: SurrogateData,
    S: Sequence[int],
    instances: np.ndarray | None = None,
) -> Node:
    """Sum over 1-based steps ``S`` of the per-step log evidence on normalized targets."""
    S = list(S)
    if not S:
        raise ValueError("step subset must be nonempty")
    steps, lengths = data.steps, data.lengths
    if instances is not None:
        steps, lengths = steps[instances], lengths[instances]
    states = fn.lstm_states(p, steps, lengths, max(S))
    Z = fn.set_encode(p, [states[t - 1] for t in S])
    G_all = fn.head(p, Z, data.X_norm)
    N = data.X_norm.shape[0]
    total = None
    for s, t in enumerate(S):
        G = G_all[s * N : (s + 1) * N]
        k = _noise_index(p, t)
        term = _step_lml(G, data.Y_norm[:, t - 1], p["blr.log_beta"][k], p["blr.log_lambda"][k], t)
        total = term if total is None else total + term
    return total


def _step_lml(G, y, lb, ll, t):
    try:
        return lml_node(G, y, lb, ll)
    except NotPositiveDefiniteError as err:
        raise StepFactorizationError(t, err) from err


def _pick_steps(T: int, cap: int, rng: np.random.Generator) -> list[int]:
    if T <= cap:
        return list(range(1, T + 1))
    return sorted((rng.choice(T, size=cap, replace=False) + 1).tolist())


def _pick_instances(I: int, cap: int, rng: np.random.Generator) -> np.ndarray | None:
    if I <= cap:
        return None
    return np.sort(rng.choice(I, size=cap, replace=False))


def fit(
    params: fn.FeatureNetParams,
    data: SurrogateData,
    M: int,
    rng: np.random.Generator,
    lr: float = 0.01,
    subsample_T: int = 32,
    instance_cap: int = 256,
) -> list[dict]:
    """Run ``M`` Adam ascent steps on the multi-task objective, in place.

    log β and log λ are projected back into fixed boxes after every step.
    Returns one log record per iteration (``iter``, ``objective``,
    ``beta_mean``, ``lambda_mean``).  A non-finite objective or a failed
    factorization rolls back the last step and halves the step size; a second
    failure raises ``TrainingError``.
    """
    store = params.store
    records: list[dict] = []
    prev = store.copy()
    halved = False
    m = 0
    while m < M:
        S = _pick_steps(data.T, subsample_T, rng)
        inst = _pick_instances(data.steps.shape[0], instance_cap, rng)
        try:
            nodes = store.nodes()
            root = multitask_objective(nodes, data, S, inst)
            value = float(root.value)
            if not np.isfinite(value):
                raise FloatingPointError("non-finite objective")
            dg.backward(root)
            grads = {k: -n.grad for k, n in nodes.items()}
            snapshot = store.copy()
            dg.adam_step(store, grads, lr)
            np.clip(store["blr.log_beta"], *LOG_BETA_BOUNDS, out=store["blr.log_beta"])
            np.clip(store["blr.log_lambda"], *LOG_LAMBDA_BOUNDS, out=store["blr.log_lambda"])
        except (FloatingPointError, NotPositiveDefiniteError) as err:
            if halved:
                raise TrainingError(f"training diverged at iteration {m}: {err}") from err
            log.warning("iteration %d: %s; rolling back and halving step size", m, err)
            _restore(store, prev)
            lr *= 0.5
            halved = True
            continue
        prev = snapshot
        records.append({
            "iter": m,
            "objective": value,
            "beta_mean": float(np.exp(store["blr.log_beta"]).mean()),
            "lambda_mean": float(np.exp(store["blr.log_lambda"]).mean()),
        })
        m += 1
    return records


def _restore(store: ParamStore, snap: ParamStore) -> None:
    for k in store.params:
        store.params[k][...] = snap.params[k]
        store.m[k][...] = snap.m[k]
        store.v[k][...] = snap.v[k]
    store.step = snap.step


def write_training_log(path, records: Sequence[dict]) -> None:
    with open(path, "w") as fh:
        fh.write("iter,objective,beta_mean,lambda_mean\n")
        for r in records:
            fh.write(f"{r['iter']},{r['objective']!r},{r['beta_mean']!r},{r['lambda_mean']!r}\n")


# --------------------------------------------------------------------------- #
# fitted surrogate


class DklSurrogate:
    """Shared feature network with one Bayesian linear head per step."""

    def __init__(self, space: HyperparamSpace, ds: SequenceDataset, cfg: RunConfig, rng: np.random.Generator):
        self.space = space
        self.ds = ds
        self.cfg = cfg
        self.T = ds.T
        self.steps = ds.steps_tensor()
        self.lengths = np.asarray(ds.lengths)
        shape = fn.NetShape(
            input_dim=ds.d + 1,
            x_dim=space.norm_width,
            hidden=cfg.hidden,
            set_width=cfg.set_width,
            head_width=cfg.head_width,
            embed_dim=cfg.embed_dim,
            feature_dim=cfg.feature_dim,
        )
        self._rng_init = rng
        self.params = self._fresh_params(shape)
        self.data: SurrogateData | None = None
        self.posteriors: list[BlrPosterior] = []
        self.Z: np.ndarray | None = None
        self.train_log: list[dict] = []

    def _fresh_params(self, shape: fn.NetShape) -> fn.FeatureNetParams:
        params = fn.init_params(shape, self._rng_init)
        add_noise_params(params.store, self.T, self.cfg.share_noise)
        return params

    def set_data(self, X_raw: np.ndarray, Y: np.ndarray) -> None:
        self.data = SurrogateData(self.steps, self.lengths, normalize(self.space, X_raw), Y)

    def fit(self, M: int, rng: np.random.Generator) -> list[dict]:
        if self.data is None:
            raise RuntimeError("set_data before fit")
        if not self.cfg.warm_start:
            self.params = self._fresh_params(self.params.shape)
        recs = fit(self.params, self.data, M, rng, self.cfg.lr, self.cfg.subsample_T, self.cfg.instance_cap)
        self.train_log.extend(recs)
        self.refresh()
        return recs

    def _prediction_instances(self) -> np.ndarray | None:
        return _pick_instances(self.steps.shape[0], self.cfg.instance_cap, np.random.default_rng(0))

    def refresh(self) -> None:
        """Recompute ``z_t`` for every step and rebuild all step posteriors."""
        inst = self._prediction_instances()
        steps, lengths = (self.steps, self.lengths) if inst is None else (self.steps[inst], self.lengths[inst])
        self.Z = fn.embeddings(self.params, steps, lengths, range(1, self.T + 1))
        p = fn._consts(self.params)
        G_all = fn.head(p, dg.constant(self.Z), self.data.X_norm).value
        N = self.data.X_norm.shape[0]
        self.posteriors = []
        for t in range(1, self.T + 1):
            k = 0 if self.params.store["blr.log_beta"].shape[0] == 1 else t - 1
            beta = float(np.exp(self.params.store["blr.log_beta"][k]))
            lam = float(np.exp(self.params.store["blr.log_lambda"][k]))
            G = G_all[(t - 1) * N : t * N]
            try:
                self.posteriors.append(posterior(G, self.data.Y_norm[:, t - 1], beta, lam))
            except NotPositiveDefiniteError as err:
                raise StepFactorizationError(t, err) from err

    def features(self, X_norm: np.ndarray, times: Sequence[int] | None = None) -> np.ndarray:
        """Feature maps of shape (len(times), n, D) for normalized candidates."""
        times = list(range(1, self.T + 1)) if times is None else list(times)
        Z = self.Z[[t - 1 for t in times]]
        p = fn._consts(self.params)
        G = fn.head(p, dg.constant(Z), X_norm).value
        return G.reshape(len(times), X_norm.shape[0], -1)

    def predict_all(self, X_norm: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Normalized predictive means and variances, each of shape (T, n)."""
        G = self.features(X_norm)
        mus, vars_ = [], []
        for t in range(self.T):
            mu, s2 = predict(self.posteriors[t], G[t])
            mus.append(mu)
            vars_.append(s2)
        return np.array(mus), np.array(vars_)

    def predict(self, t: int, X_norm: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        G = self.features(X_norm, [t])[0]
        return predict(self.posteriors[t - 1], G)

    def incumbent(self, t: int) -> float:
        return float(self.data.Y_norm[:, t - 1].max())

    def to_raw(self, t: int, mu, sigma2):
        sd = self.data.y_sd[t - 1]
        return mu * sd + self.data.y_mean[t - 1], np.asarray(sigma2) * sd * sd

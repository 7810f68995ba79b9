"""Synthetic correlated black-box families and drifting sequence datasets."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..core import Dim, HyperparamSpace, SequenceDataset, normalize, sample_many

GRID_PER_AXIS = 100
RANDOM_ORACLE_POINTS = 100_000


def default_space(d: int = 2) -> HyperparamSpace:
    return HyperparamSpace([Dim(f"x{k + 1}", "float", 0.0, 1.0) for k in range(d)])


def oracle_grid(space: HyperparamSpace, rng: np.random.Generator | None = None) -> np.ndarray:
    """Raw points on which per-step optima are computed.

    A 100-per-axis grid (10⁴ points) for one or two continuous dims; otherwise
    a seeded uniform sample of 10⁵ points.
    """
    if len(space) <= 2 and all(d.kind == "float" for d in space.dims):
        n = GRID_PER_AXIS**2 if len(space) == 1 else GRID_PER_AXIS
        axes = [np.linspace(d.lo, d.hi, n) for d in space.dims]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)
    return sample_many(space, RANDOM_ORACLE_POINTS, rng or np.random.default_rng(0))


@dataclass
class SynthFamily:
    """``f_t(x) = Σ_j α_j(t) s_j b_j(x̂)`` with Gaussian bumps ``b_j``.

    The coefficient paths follow an AR(1) process with correlation ``rho``, so
    neighbouring steps are similar when ``rho`` is near 1.
    """

    space: HyperparamSpace
    centers: np.ndarray
    widths: np.ndarray
    signs: np.ndarray
    alpha: np.ndarray
    noise_sd: float = 0.0
    seed: int = 0
    opt_value: np.ndarray = field(init=False)
    opt_x: np.ndarray = field(init=False)
    grid: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self._noise = np.random.default_rng([self.seed, 99])
        self.grid = oracle_grid(self.space, np.random.default_rng([self.seed, 98]))
        F = self.values(self.grid)
        idx = F.argmax(axis=0)
        self.opt_value = F[idx, np.arange(self.T)]
        self.opt_x = self.grid[idx]

    @property
    def T(self) -> int:
        return self.alpha.shape[0]

    def values(self, X) -> np.ndarray:
        """Noise-free scores, shape (n, T) for an (n, d) array or (T,) for one point."""
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        Z = normalize(self.space, np.atleast_2d(X))
        sq = ((Z[:, None, :] - self.centers[None]) ** 2).sum(axis=2)
        B = np.exp(-0.5 * sq / self.widths**2) * self.signs
        F = B @ self.alpha.T
        return F[0] if single else F

    def evaluate(self, x) -> np.ndarray:
        y = self.values(x)
        if self.noise_sd > 0:
            y = y + self.noise_sd * self._noise.standard_normal(self.T)
        return y


def synth_family(seed: int, T: int = 8, rho: float = 0.9, space: HyperparamSpace | None = None,
                 J: int = 12, noise_sd: float = 0.01) -> SynthFamily:
    if not 0.0 <= rho <= 1.0:
        raise ValueError("rho must lie in [0, 1]")
    if J < 1:
        raise ValueError("need at least one basis function")
    space = space or default_space()
    rng = np.random.default_rng([seed, 97])
    w = space.norm_width
    centers = rng.uniform(0.0, 1.0, size=(J, w))
    widths = rng.uniform(0.1, 0.3, size=J)
    signs = rng.choice([-1.0, 1.0], size=J)
    alpha = np.empty((T, J))
    alpha[0] = rng.standard_normal(J)
    innov = np.sqrt(max(1.0 - rho * rho, 0.0))
    for t in range(1, T):
        alpha[t] = rho * alpha[t - 1] + innov * rng.standard_normal(J)
    return SynthFamily(space, centers, widths, signs, alpha, noise_sd, seed)


@dataclass
class QuadraticFamily:
    """``f_t(x) = -(x - c_t)²`` on one continuous dimension."""

    centers: Sequence[float] = (0.3, 0.7)
    lo: float = -4.0
    hi: float = 4.0

    def __post_init__(self):
        self.c = np.asarray(self.centers, dtype=np.float64)
        self.space = HyperparamSpace([Dim("x", "float", self.lo, self.hi)])
        self.opt_value = np.zeros(self.T)
        self.opt_x = self.c[:, None].copy()

    @property
    def T(self) -> int:
        return len(self.c)

    def values(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            return -((X[0] - self.c) ** 2)
        return -((X[:, :1] - self.c[None]) ** 2)

    def evaluate(self, x) -> np.ndarray:
        return self.values(x)


# --------------------------------------------------------------------------- #
# drifting sequence data


@dataclass(frozen=True)
class DriftProfile:
    """How the generator changes over time.

    ``kind`` is ``none``, ``step`` (regime switch at 1-based step ``t0``:
    feature means jump by ``shift``, the autoregressive state restarts and the
    label rule changes) or ``smooth`` (means and label rule interpolate
    linearly from the first to the last step).
    """

    kind: str = "none"
    t0: int | None = None
    shift: float = 2.0

    def __post_init__(self):
        if self.kind not in ("none", "step", "smooth"):
            raise ValueError(f"unknown drift kind {self.kind!r}")


def synth_dataset(seed: int, T: int = 8, drift: DriftProfile | str = "none", I: int = 200, d: int = 3,
                  ar: float = 0.7) -> SequenceDataset:
    """Autoregressive features with labels from a drifting logistic rule."""
    drift = DriftProfile(drift) if isinstance(drift, str) else drift
    rng = np.random.default_rng([seed, 96])
    t0 = drift.t0 if drift.t0 is not None else T // 2 + 1
    w_a = rng.standard_normal(d)
    w_b = rng.standard_normal(d)
    bias = -1.0
    weights = np.empty((T, d))
    means = np.zeros((T, d))
    fresh = np.zeros(T, dtype=bool)
    for k in range(T):
        t = k + 1
        if drift.kind == "step" and t >= t0:
            weights[k] = w_b
            means[k] = drift.shift
            fresh[k] = t == t0
        elif drift.kind == "smooth":
            lam = k / max(T - 1, 1)
            weights[k] = (1 - lam) * w_a + lam * w_b
            means[k] = lam * drift.shift
        else:
            weights[k] = w_a
    obs = np.empty((I, T, d))
    innov = np.sqrt(1.0 - ar * ar)
    obs[:, 0] = means[0] + rng.standard_normal((I, d))
    for k in range(1, T):
        eps = rng.standard_normal((I, d))
        if fresh[k]:
            obs[:, k] = means[k] + eps
        else:
            obs[:, k] = means[k] + ar * (obs[:, k - 1] - means[k - 1]) + innov * eps
    centred = obs - means[None]
    logits = np.einsum("itd,td->it", centred, weights) + bias
    labels = (rng.random((I, T)) < 1.0 / (1.0 + np.exp(-logits))).astype(np.float64)
    return SequenceDataset(obs, labels)

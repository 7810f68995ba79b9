"""Expected improvement, the Hedge step-selection policy and the SMS-DKL loop."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np
from scipy.special import ndtr

from .core import HyperparamSpace, HyperparamVector, RunConfig, SequenceDataset, normalize, sample_many
from .surrogate import DklSurrogate

log = logging.getLogger(__name__)

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Problem(Protocol):
    """A T-step black box: one evaluation returns all T scores."""

    space: HyperparamSpace
    T: int

    def evaluate(self, x: np.ndarray) -> np.ndarray: ...


def expected_improvement(mu, sigma2, y_best):
    """EI for maximization; falls back to ``max(mu - y_best, 0)`` where σ = 0."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    if np.any(sigma2 < 0):
        raise ValueError("sigma2 must be non-negative")
    sigma = np.sqrt(sigma2)
    diff = mu - y_best
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        u = np.where(sigma > 0, diff / np.where(sigma > 0, sigma, 1.0), 0.0)
        ei = diff * ndtr(u) + sigma * _INV_SQRT_2PI * np.exp(-0.5 * u * u)
    ei = np.where(sigma > 0, np.maximum(ei, 0.0), np.maximum(diff, 0.0))
    return float(ei) if ei.ndim == 0 else ei


def initial_design(space: HyperparamSpace, n: int, seed: int) -> np.ndarray:
    """The shared random start: identical for every algorithm given the seed."""
    return sample_many(space, n, np.random.default_rng([seed, 0]))


# --------------------------------------------------------------------------- #
# proposals and the policy


@dataclass(frozen=True)
class StepProposal:
    t: int
    x_star: np.ndarray
    acq_value: float
    index: int = 0

    def __post_init__(self):
        if not self.acq_value >= 0:
            raise ValueError(f"acquisition value must be non-negative, got {self.acq_value}")


def best_candidate(ei: np.ndarray) -> int:
    """Index of the largest EI; ``np.argmax`` already returns the first of ties."""
    return int(np.argmax(ei))


def maximize_acquisition(
    predict: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]],
    y_best: float,
    space: HyperparamSpace,
    candidates: np.ndarray | int,
    rng: np.random.Generator | None = None,
    t: int = 1,
) -> StepProposal:
    """Maximize EI for one step over a finite candidate pool.

    ``predict`` maps normalized candidates to predictive means and variances.
    ``candidates`` is either a raw (n, d) array or a pool size, in which case
    the pool is drawn from ``rng``.
    """
    if isinstance(candidates, (int, np.integer)):
        if candidates < 1:
            raise ValueError("candidate pool must hold at least one point")
        candidates = sample_many(space, int(candidates), rng)
    mu, sigma2 = predict(normalize(space, candidates))
    ei = expected_improvement(mu, sigma2, y_best)
    k = best_candidate(np.atleast_1d(ei))
    return StepProposal(t, candidates[k].copy(), float(np.atleast_1d(ei)[k]), k)


def hedge_probabilities(values: Sequence[float]) -> np.ndarray:
    a = np.asarray(values, dtype=np.float64)
    if np.any(a < 0) or not np.all(np.isfinite(a)):
        raise ValueError("acquisition values must be finite and non-negative")
    total = a.sum()
    if total <= 0:
        return np.full(a.size, 1.0 / a.size)
    return a / total


def hedge_select(proposals: Sequence[StepProposal], rng: np.random.Generator) -> tuple[StepProposal, np.ndarray]:
    """Pick one step's proposal with probability proportional to its EI.

    Returns the chosen proposal and the full probability vector.
    """
    if not proposals:
        raise ValueError("no proposals to choose from")
    p = hedge_probabilities([q.acq_value for q in proposals])
    u = rng.random()
    k = int(np.searchsorted(np.cumsum(p), u, side="right"))
    return proposals[min(k, len(proposals) - 1)], p


# --------------------------------------------------------------------------- #
# run history


@dataclass
class Record:
    iter: int
    x: np.ndarray
    y: np.ndarray
    chosen_t: int | None = None
    probs: np.ndarray | None = None
    seconds: float = 0.0


@dataclass
class RunHistory:
    """Every evaluation of a run, initial design first (``iter`` 0)."""

    algorithm: str
    space: HyperparamSpace | None
    T: int
    records: list[Record] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)
    extras: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    def add(self, rec: Record) -> None:
        rec.y = np.asarray(rec.y, dtype=np.float64)
        if rec.y.shape != (self.T,):
            raise ValueError(f"expected {self.T} scores, got shape {rec.y.shape}")
        self.records.append(rec)

    @property
    def X(self) -> np.ndarray:
        return np.array([r.x for r in self.records])

    @property
    def Y(self) -> np.ndarray:
        return np.array([r.y for r in self.records]).reshape(-1, self.T)

    def incumbents(self) -> np.ndarray:
        """Running per-step best score after each evaluation, shape (n, T)."""
        return np.maximum.accumulate(self.Y, axis=0)

    def single_incumbents(self) -> np.ndarray:
        """Per-step scores of the running best single model (largest score sum)."""
        Y = self.Y
        out = np.empty_like(Y)
        best = 0
        for n in range(len(Y)):
            if Y[n].sum() > Y[best].sum():
                best = n
            out[n] = Y[best]
        return out

    def incumbent_points(self) -> list[tuple[np.ndarray, float]]:
        Y = self.Y
        return [(self.records[int(np.argmax(Y[:, t]))].x, float(Y[:, t].max())) for t in range(self.T)]

    # ---- csv ------------------------------------------------------------- #

    def header(self) -> list[str]:
        T = range(1, self.T + 1)
        return (["iter", "chosen_t", "x_json"] + [f"y_{t}" for t in T] + [f"inc_{t}" for t in T]
                + [f"p_{t}" for t in T] + ["seconds"])

    def to_csv(self, path: str | Path, timing: bool = True) -> None:
        inc = self.incumbents() if self.records else np.zeros((0, self.T))
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.header())
            for n, r in enumerate(self.records):
                xs = self.space.format_values(r.x) if self.space is not None else [float(v) for v in r.x]
                probs = [repr(float(v)) for v in r.probs] if r.probs is not None else [""] * self.T
                w.writerow(
                    [r.iter, "" if r.chosen_t is None else r.chosen_t, json.dumps(xs)]
                    + [repr(float(v)) for v in r.y]
                    + [repr(float(v)) for v in inc[n]]
                    + probs
                    + [repr(float(r.seconds)) if timing else ""]
                )

    @classmethod
    def from_csv(cls, path: str | Path, space: HyperparamSpace | None = None, algorithm: str = "") -> "RunHistory":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            T = sum(1 for h in header if h.startswith("y_"))
            hist = cls(algorithm, space, T)
            for row in reader:
                ys = np.array([float(v) for v in row[3 : 3 + T]])
                ps = row[3 + 2 * T : 3 + 3 * T]
                probs = np.array([float(v) for v in ps]) if all(ps) else None
                hist.records.append(Record(
                    iter=int(row[0]),
                    x=np.array(json.loads(row[2]), dtype=np.float64),
                    y=ys,
                    chosen_t=int(row[1]) if row[1] else None,
                    probs=probs,
                    seconds=float(row[-1]) if row[-1] else 0.0,
                ))
        return hist


def evaluate_initial(problem: Problem, X0: np.ndarray, history: RunHistory) -> None:
    for x in X0:
        t0 = time.perf_counter()
        try:
            y = np.asarray(problem.evaluate(x), dtype=np.float64)
        except Exception as err:  # noqa: BLE001 - a failed evaluation is data
            history.failures.append({"iter": 0, "x": x.tolist(), "error": repr(err)})
            continue
        history.add(Record(0, x.copy(), y, seconds=time.perf_counter() - t0))
    if not history.records:
        raise RuntimeError("every initial evaluation failed")


def try_evaluate(problem: Problem, x: np.ndarray, it: int, history: RunHistory):
    try:
        y = np.asarray(problem.evaluate(x), dtype=np.float64)
        if y.shape != (history.T,) or not np.all(np.isfinite(y)):
            raise ValueError(f"evaluation returned {y!r}")
        return y
    except Exception as err:  # noqa: BLE001
        log.warning("evaluation failed at iteration %d: %r", it, err)
        history.failures.append({"iter": it, "x": x.tolist(), "error": repr(err)})
        return None


# --------------------------------------------------------------------------- #
# SMS-DKL


class SmsDkl:
    """Ask/tell driver for the stepwise DKL optimizer.

    ``suggest`` refits the shared network on all observations, finds each
    step's EI maximizer over one shared candidate pool and samples one of them
    with the Hedge policy.  ``observe`` appends a point and its T scores to
    every step's acquisition set.
    """

    def __init__(self, space: HyperparamSpace, ds: SequenceDataset, cfg: RunConfig,
                 surrogate: DklSurrogate | None = None):
        self.space = space
        self.cfg = cfg
        self.T = ds.T
        self.X: list[np.ndarray] = []
        self.Y: list[np.ndarray] = []
        self.rng_train = np.random.default_rng([cfg.seed, 1])
        self.rng_acq = np.random.default_rng([cfg.seed, 2])
        self.surrogate = surrogate or DklSurrogate(space, ds, cfg, np.random.default_rng([cfg.seed, 3]))
        self.last: dict = {}

    def initial_points(self) -> np.ndarray:
        return initial_design(self.space, self.cfg.n_init, self.cfg.seed)

    def observe(self, x, y) -> None:
        y = np.asarray(y, dtype=np.float64)
        if y.shape != (self.T,):
            raise ValueError(f"expected {self.T} scores, got shape {y.shape}")
        self.X.append(np.asarray(x, dtype=np.float64).copy())
        self.Y.append(y)

    def proposals(self, candidates: np.ndarray) -> list[StepProposal]:
        mu, s2 = self.surrogate.predict_all(normalize(self.space, candidates))
        out = []
        for t in range(1, self.T + 1):
            ei = expected_improvement(mu[t - 1], s2[t - 1], self.surrogate.incumbent(t))
            k = best_candidate(ei)
            out.append(StepProposal(t, candidates[k].copy(), float(ei[k]), k))
        return out

    def suggest(self) -> np.ndarray:
        if not self.X:
            raise RuntimeError("observe at least one point before suggest")
        self.surrogate.set_data(np.array(self.X), np.array(self.Y))
        recs = self.surrogate.fit(self.cfg.m_train, self.rng_train)
        candidates = sample_many(self.space, self.cfg.candidate_pool, self.rng_acq)
        props = self.proposals(candidates)
        chosen, probs = hedge_select(props, self.rng_acq)
        self.last = {"proposals": props, "chosen": chosen, "probs": probs,
                     "objective": recs[-1]["objective"] if recs else None}
        return chosen.x_star


def sms_dkl_run(problem: Problem, ds: SequenceDataset, cfg: RunConfig,
                surrogate: DklSurrogate | None = None) -> RunHistory:
    """Run the full stepwise loop and return its history.

    Failed evaluations are logged in ``history.failures`` and do not add rows.
    """
    if ds.T != problem.T:
        raise ValueError(f"dataset has T={ds.T} but problem has T={problem.T}")
    opt = SmsDkl(problem.space, ds, cfg, surrogate)
    history = RunHistory("sms_dkl", problem.space, problem.T)
    evaluate_initial(problem, opt.initial_points(), history)
    for r in history.records:
        opt.observe(r.x, r.y)
    for it in range(1, cfg.n_iters + 1):
        t0 = time.perf_counter()
        x = opt.suggest()
        y = try_evaluate(problem, x, it, history)
        if y is None:
            continue
        opt.observe(x, y)
        history.add(Record(it, x, y, chosen_t=opt.last["chosen"].t, probs=opt.last["probs"],
                           seconds=time.perf_counter() - t0))
    if cfg.n_iters > 0 and opt.surrogate.Z is not None:
        history.extras["embeddings"] = opt.surrogate.Z.copy()
        history.extras["train_log"] = list(opt.surrogate.train_log)
    return history


def as_vector(space: HyperparamSpace, x: np.ndarray) -> HyperparamVector:
    return HyperparamVector(space, tuple(float(v) for v in x))

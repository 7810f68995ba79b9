"""A tiny recurrent classifier whose hyperparameters form a real T-step black box."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .. import diffgraph as dg
from ..core import Dim, HyperparamSpace, SequenceDataset
from .synth import DriftProfile, synth_dataset


def auprc(scores, labels, with_flag: bool = False):
    """Average precision with tied scores grouped into one threshold.

    Degenerate inputs: all-positive labels give 1.0; all-negative labels give
    0.0 and raise the flag.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.float64).ravel()
    if s.size == 0:
        raise ValueError("auprc of empty input")
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = y.sum()
    if n_pos == 0:
        return (0.0, True) if with_flag else 0.0
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    # last index of each tied block
    ends = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp = np.cumsum(y)[ends]
    precision = tp / (ends + 1)
    gained = np.diff(np.r_[0.0, tp])
    ap = float(np.sum(gained * precision) / n_pos)
    return (ap, False) if with_flag else ap


def inner_space() -> HyperparamSpace:
    return HyperparamSpace([
        Dim("hidden", "int", 2, 16),
        Dim("epochs", "int", 0, 30),
        Dim("batch", "int", 8, 64),
        Dim("log10_lr", "int", -4, -1),
        Dim("log10_wd", "int", -8, -2),
        Dim("input_dropout", "float", 0.0, 0.5),
    ])


@dataclass
class InnerLearnerTask:
    """Train/validation split of a drifting dataset plus the model space."""

    data: SequenceDataset
    seed: int = 0
    valid_frac: float = 0.3
    space: HyperparamSpace = field(default_factory=inner_space)

    def __post_init__(self):
        rng = np.random.default_rng([self.seed, 95])
        idx = rng.permutation(self.data.n_instances)
        n_valid = max(1, int(round(self.valid_frac * len(idx))))
        self.valid = self.data.subset(np.sort(idx[:n_valid]))
        self.train = self.data.subset(np.sort(idx[n_valid:]))
        self.last_flags: dict = {}

    @property
    def T(self) -> int:
        return self.data.T

    def evaluate(self, x) -> np.ndarray:
        return inner_eval(self, x, self.seed)


def make_inner_task(seed: int, T: int = 8, drift: str = "step", I: int = 200, d: int = 3) -> InnerLearnerTask:
    return InnerLearnerTask(synth_dataset(seed, T, DriftProfile(drift), I=I, d=d), seed)


def _init(rng, d_in, H):
    a, b = 1 / math.sqrt(d_in), 1 / math.sqrt(H)
    store = dg.ParamStore()
    store.add("W", rng.uniform(-a, a, (d_in, H)))
    store.add("U", rng.uniform(-b, b, (H, H)))
    store.add("b", np.zeros(H))
    store.add("v", rng.uniform(-b, b, H))
    store.add("c", np.zeros(()))
    return store


def _logits(p, obs: np.ndarray, drop_mask: np.ndarray | None = None) -> list:
    I, T, _ = obs.shape
    H = p["U"].shape[0]
    h = dg.constant(np.zeros((I, H)))
    out = []
    for k in range(T):
        xk = obs[:, k, :] if drop_mask is None else obs[:, k, :] * drop_mask[:, k, :]
        h = dg.tanh(dg.constant(xk) @ p["W"] + h @ p["U"] + p["b"])
        out.append(h @ p["v"] + p["c"])
    return out


def _loss(p, obs, labels, mask, wd, drop_mask):
    logits = _logits(p, obs, drop_mask)
    total = None
    n = mask.sum()
    for k, z in enumerate(logits):
        pk = dg.sigmoid(z)
        e = labels[:, k]
        m = mask[:, k]
        # binary cross-entropy, eps keeps log finite at saturation
        ll = e * m * dg.log(pk + 1e-7) + (1 - e) * m * dg.log(1.0 - pk + 1e-7)
        term = dg.sum_(ll)
        total = term if total is None else total + term
    reg = dg.sum_(p["W"] * p["W"]) + dg.sum_(p["U"] * p["U"])
    return (-1.0 / n) * total + wd * reg


def inner_eval_detailed(task: InnerLearnerTask, x, seed: int) -> tuple[np.ndarray, dict]:
    """Train once with hyperparameters ``x`` and score AUPRC at every step."""
    hidden, epochs, batch, log_lr, log_wd, dropout = (float(v) for v in x)
    hidden, epochs, batch = int(hidden), int(epochs), int(batch)
    lr, wd = 10.0**log_lr, 10.0**log_wd
    rng = np.random.default_rng([seed, 94])
    train, valid = task.train, task.valid
    store = _init(rng, train.d, hidden)
    mask = (np.arange(train.T)[None, :] < train.lengths[:, None]).astype(np.float64)
    diverged = False
    n = train.n_instances
    for _ in range(epochs):
        perm = rng.permutation(n)
        for start in range(0, n, batch):
            idx = perm[start : start + batch]
            drop = None
            if dropout > 0:
                drop = (rng.random(train.obs[idx].shape) >= dropout) / (1.0 - dropout)
            nodes = store.nodes()
            loss = _loss(nodes, train.obs[idx], train.labels[idx], mask[idx], wd, drop)
            if not np.isfinite(loss.value):
                diverged = True
                break
            dg.backward(loss)
            try:
                dg.adam_step(store, {k: v.grad for k, v in nodes.items()}, lr)
            except FloatingPointError:
                diverged = True
                break
        if diverged:
            break
    flags = {"diverged": diverged, "degenerate_steps": []}
    if not diverged:
        logits = np.stack([z.value for z in _logits(store.params, valid.obs)], axis=1)
        if not np.all(np.isfinite(logits)):
            diverged = True
            flags["diverged"] = True
    y = np.empty(valid.T)
    for k in range(valid.T):
        alive = valid.lengths > k
        labels = valid.labels[alive, k]
        scores = np.zeros(labels.size) if diverged else logits[alive, k]
        y[k], degenerate = auprc(scores, labels, with_flag=True)
        if degenerate:
            flags["degenerate_steps"].append(k + 1)
    return y, flags


def inner_eval(task: InnerLearnerTask, x, seed: int) -> np.ndarray:
    y, flags = inner_eval_detailed(task, x, seed)
    task.last_flags = flags
    return y

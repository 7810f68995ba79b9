"""Domain types: hyperparameter spaces, sequence datasets and acquisition sets."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Literal, Sequence

import numpy as np

Kind = Literal["int", "float", "cat"]


@dataclass(frozen=True)
class Dim:
    """One search dimension.

    For ``int`` and ``float`` dims ``lo``/``hi`` are inclusive bounds.  For
    ``cat`` dims ``hi`` is the number of levels and values are level indices.
    """

    name: str
    kind: Kind
    lo: float = 0
    hi: float = 1

    def __post_init__(self):
        if self.kind not in ("int", "float", "cat"):
            raise ValueError(f"unknown dimension kind {self.kind!r}")
        if self.kind == "cat":
            if int(self.hi) != self.hi or self.hi < 2:
                raise ValueError(f"categorical dim {self.name!r} needs an integer level count >= 2")
        elif not self.lo <= self.hi:
            raise ValueError(f"dim {self.name!r}: lo={self.lo} exceeds hi={self.hi}")
        if self.kind == "int" and (int(self.lo) != self.lo or int(self.hi) != self.hi):
            raise ValueError(f"integer dim {self.name!r} needs integer bounds")

    @property
    def levels(self) -> int:
        return int(self.hi)

    @property
    def width(self) -> int:
        return self.levels if self.kind == "cat" else 1

    def contains(self, v: float) -> bool:
        if not np.isfinite(v):
            return False
        if self.kind == "cat":
            return v == int(v) and 0 <= v < self.levels
        if self.kind == "int" and v != int(v):
            return False
        return self.lo <= v <= self.hi


class HyperparamSpace:
    """Ordered mixed integer/continuous/categorical search space."""

    def __init__(self, dims: Sequence[Dim]):
        dims = tuple(dims)
        if not dims:
            raise ValueError("space needs at least one dimension")
        names = [d.name for d in dims]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate dimension names in {names}")
        self.dims = dims

    def __len__(self) -> int:
        return len(self.dims)

    def __eq__(self, other) -> bool:
        return isinstance(other, HyperparamSpace) and self.dims == other.dims

    def __hash__(self) -> int:
        return hash(self.dims)

    def __repr__(self) -> str:
        return f"HyperparamSpace({list(self.dims)!r})"

    @property
    def names(self) -> list[str]:
        return [d.name for d in self.dims]

    @property
    def norm_width(self) -> int:
        return sum(d.width for d in self.dims)

    def contains(self, values: Sequence[float]) -> bool:
        return len(values) == len(self.dims) and all(d.contains(v) for d, v in zip(self.dims, values))

    def to_dict(self) -> list[dict]:
        return [{"name": d.name, "kind": d.kind, "lo": d.lo, "hi": d.hi} for d in self.dims]

    @classmethod
    def from_dict(cls, spec: Sequence[dict]) -> "HyperparamSpace":
        dims = []
        for item in spec:
            kind = item["kind"]
            if kind == "cat":
                dims.append(Dim(item["name"], "cat", 0, item.get("levels", item.get("hi"))))
            else:
                dims.append(Dim(item["name"], kind, item["lo"], item["hi"]))
        return cls(dims)

    def format_values(self, values: Sequence[float]) -> list:
        """Values as JSON-friendly Python numbers (ints for int/cat dims)."""
        return [int(round(v)) if d.kind != "float" else float(v) for d, v in zip(self.dims, values)]


@dataclass(frozen=True)
class HyperparamVector:
    space: HyperparamSpace
    values: tuple

    def __post_init__(self):
        if not self.space.contains(self.values):
            raise ValueError(f"{self.values} is not a point of {self.space}")

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype or np.float64)

    def to_json(self) -> str:
        return json.dumps(self.space.format_values(self.values))


def sample_many(space: HyperparamSpace, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` independent uniform points as an ``(n, len(space))`` float array."""
    out = np.empty((n, len(space)))
    for j, d in enumerate(space.dims):
        if d.kind == "int":
            out[:, j] = rng.integers(int(d.lo), int(d.hi) + 1, size=n)
        elif d.kind == "cat":
            out[:, j] = rng.integers(0, d.levels, size=n)
        else:
            out[:, j] = rng.uniform(d.lo, d.hi, size=n)
    return out


def sample_uniform(space: HyperparamSpace, rng: np.random.Generator) -> HyperparamVector:
    row = sample_many(space, 1, rng)[0]
    return HyperparamVector(space, tuple(row.tolist()))


def normalize(space: HyperparamSpace, x) -> np.ndarray:
    """Map points to the unit cube; categorical dims become one-hot blocks.

    Accepts a single point (returns a vector) or an ``(n, d)`` array.
    """
    X = np.asarray(x, dtype=np.float64)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    cols = []
    for j, d in enumerate(space.dims):
        v = X[:, j]
        if d.kind == "cat":
            cols.append(np.eye(d.levels)[v.astype(int)])
        else:
            span = d.hi - d.lo
            cols.append(((v - d.lo) / span if span > 0 else np.zeros_like(v))[:, None])
    out = np.hstack(cols)
    return out[0] if single else out


# --------------------------------------------------------------------------- #
# sequence data


class SequenceDataset:
    """``I`` variable-length sequences of (observation vector, scalar label).

    Stored padded as ``obs`` of shape (I, T, d) and ``labels`` of shape (I, T)
    with per-instance ``lengths``; padding entries are zero.
    """

    def __init__(self, obs: np.ndarray, labels: np.ndarray, lengths: Sequence[int] | None = None):
        obs = np.asarray(obs, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.float64)
        if obs.ndim != 3 or labels.shape != obs.shape[:2]:
            raise ValueError(f"obs must be (I, T, d) and labels (I, T); got {obs.shape} and {labels.shape}")
        I, T, _ = obs.shape
        lengths = np.full(I, T, dtype=int) if lengths is None else np.array(lengths, dtype=int)
        if lengths.shape != (I,) or np.any(lengths < 1) or np.any(lengths > T):
            raise ValueError("every instance needs 1 <= length <= T")
        mask = np.arange(T)[None, :] < lengths[:, None]
        if not np.all(np.isfinite(labels[mask])) or not np.all(np.isfinite(obs[mask])):
            raise ValueError("observations and labels must be finite")
        obs = obs.copy()
        labels = labels.copy()
        obs[~mask] = 0.0
        labels[~mask] = 0.0
        obs.setflags(write=False)
        labels.setflags(write=False)
        lengths.setflags(write=False)
        self.obs = obs
        self.labels = labels
        self.lengths = lengths

    @property
    def n_instances(self) -> int:
        return self.obs.shape[0]

    @property
    def T(self) -> int:
        return self.obs.shape[1]

    @property
    def d(self) -> int:
        return self.obs.shape[2]

    def instance(self, i: int) -> list[tuple[np.ndarray, float]]:
        n = self.lengths[i]
        return [(self.obs[i, k], float(self.labels[i, k])) for k in range(n)]

    def subset(self, idx: Sequence[int]) -> "SequenceDataset":
        idx = np.asarray(idx, dtype=int)
        return SequenceDataset(self.obs[idx], self.labels[idx], self.lengths[idx])

    def steps_tensor(self) -> np.ndarray:
        """Per-step network inputs ``[o ⊕ e]`` of shape (I, T, d + 1)."""
        return np.concatenate([self.obs, self.labels[..., None]], axis=2)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["instance_id", "t", "e"] + [f"o{k + 1}" for k in range(self.d)])
            for i in range(self.n_instances):
                for k in range(self.lengths[i]):
                    w.writerow([i, k + 1, repr(float(self.labels[i, k]))] + [repr(float(v)) for v in self.obs[i, k]])

    @classmethod
    def from_csv(cls, path: str | Path) -> "SequenceDataset":
        """Load the ``instance_id,t,e,o1..od`` format; rows sorted by (instance_id, t)."""
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header[:3] != ["instance_id", "t", "e"]:
                raise ValueError(f"bad header {header[:3]}, expected instance_id,t,e")
            d = len(header) - 3
            if header[3:] != [f"o{k + 1}" for k in range(d)]:
                raise ValueError("observation columns must be o1..od")
            seqs: dict[str, list[tuple[int, float, list[float]]]] = {}
            order: list[str] = []
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != d + 3:
                    raise ValueError(f"line {lineno}: expected {d + 3} fields, got {len(row)}")
                iid, t = row[0], int(row[1])
                if iid not in seqs:
                    if order and iid in order:
                        raise ValueError(f"line {lineno}: rows of instance {iid} are not contiguous")
                    seqs[iid] = []
                    order.append(iid)
                elif order[-1] != iid:
                    raise ValueError(f"line {lineno}: rows of instance {iid} are not contiguous")
                prev = seqs[iid][-1][0] if seqs[iid] else 0
                if t != prev + 1:
                    raise ValueError(f"line {lineno}: instance {iid} has t={t} after t={prev}")
                seqs[iid].append((t, float(row[2]), [float(v) for v in row[3:]]))
        if not seqs:
            raise ValueError("dataset file has no rows")
        T = max(len(s) for s in seqs.values())
        I = len(order)
        obs = np.zeros((I, T, d))
        labels = np.zeros((I, T))
        lengths = np.zeros(I, dtype=int)
        for i, iid in enumerate(order):
            for k, (_, e, o) in enumerate(seqs[iid]):
                obs[i, k] = o
                labels[i, k] = e
            lengths[i] = len(seqs[iid])
        return cls(obs, labels, lengths)


@dataclass(frozen=True)
class Filtration:
    """Read-only view of the first ``t`` steps of every instance (1-based ``t``)."""

    parent: SequenceDataset
    t: int

    def __post_init__(self):
        if not 1 <= self.t <= self.parent.T:
            raise IndexError(f"t={self.t} outside 1..{self.parent.T}")

    @property
    def lengths(self) -> np.ndarray:
        return np.minimum(self.parent.lengths, self.t)

    def __iter__(self) -> Iterator[list[tuple[np.ndarray, float]]]:
        for i in range(self.parent.n_instances):
            n = min(self.parent.lengths[i], self.t)
            yield [(self.parent.obs[i, k], float(self.parent.labels[i, k])) for k in range(n)]

    def __len__(self) -> int:
        return self.parent.n_instances


def filtration(ds: SequenceDataset, t: int) -> Filtration:
    return Filtration(ds, t)


# --------------------------------------------------------------------------- #
# acquisition bookkeeping


@dataclass
class AcquisitionSet:
    t: int
    X: list = field(default_factory=list)
    y: list = field(default_factory=list)

    def append(self, x, y: float) -> None:
        self.X.append(x)
        self.y.append(float(y))

    def __len__(self) -> int:
        return len(self.y)

    def best(self) -> tuple:
        i = int(np.argmax(self.y))
        return self.X[i], self.y[i]


@dataclass(frozen=True)
class RunConfig:
    """Budgets and network sizes for one optimization run.

    Defaults follow the published setup where it is stated (M=500, LSTM width
    50, set/head widths 32, embedding size 1) and desk-scale choices elsewhere.
    """

    n_init: int = 5
    n_iters: int = 500
    m_train: int = 500
    seed: int = 0
    candidate_pool: int = 2000
    embed_dim: int = 1
    feature_dim: int = 32
    subsample_T: int = 32
    hidden: int = 50
    set_width: int = 32
    head_width: int = 32
    instance_cap: int = 256
    lr: float = 0.01
    warm_start: bool = True
    share_noise: bool = False

    def __post_init__(self):
        for name in ("n_init", "candidate_pool", "embed_dim", "feature_dim", "subsample_T",
                     "hidden", "set_width", "head_width", "instance_cap"):
            if getattr(self, name) < 1:
                raise ValueError(f"RunConfig.{name} must be positive")
        if self.n_iters < 0 or self.m_train < 0:
            raise ValueError("RunConfig.n_iters and m_train must be non-negative")
        if self.lr <= 0:
            raise ValueError("RunConfig.lr must be positive")

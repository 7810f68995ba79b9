"""The deep-kernel feature network.

Three stacked parts turn a (filtration, hyperparameter) pair into a feature
vector ``g``:

1. an LSTM run over each instance's ``[o ⊕ e]`` steps, giving ``h_{i,t}``;
2. a set encoder (two ReLU layers per row, mean pooling over instances,
   two more layers) mapping the rows ``H_t`` to an embedding ``z_t``;
3. a tanh MLP on ``z_t ⊕ x_norm`` producing ``g``.

The graph-building functions (``lstm_states``, ``set_encode``, ``head``) take
a dict of parameter nodes so the whole pipeline is differentiable.  The
``encode_instance`` / ``encode_set`` / ``feature_map`` wrappers evaluate the
same code on plain arrays.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import diffgraph as dg
from .diffgraph import Node, ParamStore

SET_LAYERS = 4
HEAD_LAYERS = 3


@dataclass(frozen=True)
class NetShape:
    input_dim: int
    x_dim: int
    hidden: int = 50
    set_width: int = 32
    head_width: int = 32
    embed_dim: int = 1
    feature_dim: int = 32

    def set_dims(self) -> list[tuple[int, int]]:
        w = self.set_width
        return [(self.hidden, w), (w, w), (w, w), (w, self.embed_dim)]

    def head_dims(self) -> list[tuple[int, int]]:
        w = self.head_width
        return [(self.embed_dim + self.x_dim, w), (w, w), (w, self.feature_dim)]


@dataclass
class FeatureNetParams:
    shape: NetShape
    store: ParamStore

    def arrays(self) -> dict[str, np.ndarray]:
        return self.store.params


def init_params(shape: NetShape, rng: np.random.Generator) -> FeatureNetParams:
    """Uniform(±1/sqrt(fan_in)) weights, zero biases, forget-gate bias 1."""
    store = ParamStore()
    H = shape.hidden

    def uni(fan_in, size):
        a = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-a, a, size=size)

    store.add("lstm.W", uni(shape.input_dim, (shape.input_dim, 4 * H)))
    store.add("lstm.U", uni(H, (H, 4 * H)))
    b = np.zeros(4 * H)
    b[H : 2 * H] = 1.0
    store.add("lstm.b", b)
    for k, (i, o) in enumerate(shape.set_dims(), start=1):
        store.add(f"set.W{k}", uni(i, (i, o)))
        store.add(f"set.b{k}", np.zeros(o))
    for k, (i, o) in enumerate(shape.head_dims(), start=1):
        store.add(f"head.W{k}", uni(i, (i, o)))
        store.add(f"head.b{k}", np.zeros(o))
    return FeatureNetParams(shape, store)


# --------------------------------------------------------------------------- #
# graph builders


def lstm_states(p: Mapping[str, Node], steps: np.ndarray, lengths: np.ndarray, t_max: int) -> list[Node]:
    """Hidden states after steps 1..t_max for every instance.

    ``steps`` is (I, T, input_dim).  Instances shorter than a step keep their
    last hidden state, so entry ``t-1`` of the result is ``H_t``.
    """
    I = steps.shape[0]
    H = p["lstm.U"].shape[0]
    h = dg.constant(np.zeros((I, H)))
    c = dg.constant(np.zeros((I, H)))
    out = []
    for k in range(t_max):
        pre = dg.constant(steps[:, k, :]) @ p["lstm.W"] + h @ p["lstm.U"] + p["lstm.b"]
        i_g = dg.sigmoid(pre[:, 0:H])
        f_g = dg.sigmoid(pre[:, H : 2 * H])
        c_in = dg.tanh(pre[:, 2 * H : 3 * H])
        o_g = dg.sigmoid(pre[:, 3 * H : 4 * H])
        c_new = f_g * c + i_g * c_in
        h_new = o_g * dg.tanh(c_new)
        alive = lengths > k
        if alive.all():
            h, c = h_new, c_new
        else:
            m = alive.astype(np.float64)[:, None]
            h = h_new * m + h * (1.0 - m)
            c = c_new * m + c * (1.0 - m)
        out.append(h)
    return out


def set_encode(p: Mapping[str, Node], Hs: Sequence[Node]) -> Node:
    """Embeddings for a batch of instance matrices, one row per matrix.

    All matrices must share the instance count.  Rows are pooled with a fixed
    averaging matrix so summation order does not depend on the batch.
    """
    S = len(Hs)
    I = Hs[0].shape[0]
    rows = Hs[0] if S == 1 else dg.concat(Hs, axis=0)
    a = dg.relu(rows @ p["set.W1"] + p["set.b1"])
    a = dg.relu(a @ p["set.W2"] + p["set.b2"])
    pool = np.kron(np.eye(S), np.full((1, I), 1.0 / I))
    pooled = dg.constant(pool) @ a
    a = dg.relu(pooled @ p["set.W3"] + p["set.b3"])
    return a @ p["set.W4"] + p["set.b4"]


def head(p: Mapping[str, Node], Z: Node, X_norm: np.ndarray) -> Node:
    """Feature maps for every (embedding row, candidate) pair.

    Returns an ``(S * N, D)`` node whose rows ``s*N .. s*N + N - 1`` belong to
    embedding row ``s``.
    """
    S = Z.shape[0]
    N = X_norm.shape[0]
    rep = np.repeat(np.eye(S), N, axis=0)
    inp = dg.concat([dg.constant(rep) @ Z, dg.constant(np.tile(X_norm, (S, 1)))], axis=1)
    a = inp
    for k in range(1, HEAD_LAYERS + 1):
        a = dg.tanh(a @ p[f"head.W{k}"] + p[f"head.b{k}"])
    return a


# --------------------------------------------------------------------------- #
# array-level wrappers


def _consts(params) -> dict[str, Node]:
    arrays = params.arrays() if isinstance(params, FeatureNetParams) else params
    return {k: dg.constant(v) for k, v in arrays.items()}


def encode_instance(params, steps: np.ndarray) -> np.ndarray:
    """Final LSTM hidden state for one instance given its (t, input_dim) steps."""
    steps = np.asarray(steps, dtype=np.float64)
    if steps.ndim != 2 or steps.shape[0] < 1:
        raise ValueError("encode_instance needs at least one step of shape (t, input_dim)")
    p = _consts(params)
    states = lstm_states(p, steps[None], np.array([steps.shape[0]]), steps.shape[0])
    return states[-1].value[0]


def encode_set(params, H: np.ndarray) -> np.ndarray:
    p = _consts(params)
    return set_encode(p, [dg.constant(np.atleast_2d(H))]).value[0]


def feature_map(params, z: np.ndarray, x_norm: np.ndarray) -> np.ndarray:
    p = _consts(params)
    X = np.atleast_2d(x_norm)
    g = head(p, dg.constant(np.atleast_2d(z)), X).value
    return g[0] if np.ndim(x_norm) == 1 else g


def embeddings(params, steps: np.ndarray, lengths: np.ndarray, times: Sequence[int]) -> np.ndarray:
    """``z_t`` for each 1-based ``t`` in ``times`` as a (len(times), embed_dim) array."""
    p = _consts(params)
    states = lstm_states(p, steps, lengths, max(times))
    return set_encode(p, [states[t - 1] for t in times]).value


# --------------------------------------------------------------------------- #
# checkpoints


def save_params(path: str | Path, params: FeatureNetParams) -> None:
    """Write a ``.npz`` archive: one float64 array per parameter plus the shape header."""
    arrays = {k: v for k, v in params.store.params.items()}
    arrays["__shape__"] = np.array(json.dumps(asdict(params.shape)))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_params(path: str | Path) -> FeatureNetParams:
    with np.load(path, allow_pickle=False) as data:
        shape = NetShape(**json.loads(str(data["__shape__"])))
        store = ParamStore()
        for k in data.files:
            if k != "__shape__":
                store.add(k, data[k])
    return FeatureNetParams(shape, store)

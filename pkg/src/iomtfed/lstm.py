"""Stacked time-distributed LSTM with analytic BPTT and minibatch SGD.

A window is a 4 x d matrix (rows are timesteps). Layer 0 consumes the
window, each higher layer consumes the hidden sequence of the layer below,
and a fully connected head maps the top hidden states to the output:

* ``reconstruction``: the FC head is shared across the 4 timesteps and
  reproduces the window, ``y_t = sigmoid(W_fc h_t + b_fc)``.
* ``classifier``: one probability from the last timestep,
  ``y = sigmoid(W_fc h_4 + b_fc)``.

Gate weights act on the concatenation ``[h_{t-1}, x_t]`` (hidden first).
Everything internally is batched along columns; a single window is a batch
of one and produces bitwise the same numbers as it would inside a batch.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .numeric import Matrix, SeededRng, ShapeError, init_uniform, matmul, sigmoid, zeros

WINDOW_LENGTH = 4
HEADS = ("reconstruction", "classifier")
GATES = ("f", "i", "c", "o")
BCE_EPS = 1e-12
INIT_SCALE = 0.08


class WindowError(ValueError):
    """A window does not have exactly ``WINDOW_LENGTH`` timesteps."""


class DomainError(ValueError):
    """Loss target outside [0, 1]."""


class EmptyDatasetError(ValueError):
    """A client has no training windows; the caller should skip it."""


@dataclass
class LstmLayerParams:
    W_f: Matrix
    W_i: Matrix
    W_c: Matrix
    W_o: Matrix
    b_f: Matrix
    b_i: Matrix
    b_c: Matrix
    b_o: Matrix

    def __post_init__(self):
        shape_w = self.W_f.shape
        shape_b = self.b_f.shape
        if any(getattr(self, f"W_{g}").shape != shape_w for g in GATES):
            raise ShapeError("gate weight matrices must share one shape")
        if any(getattr(self, f"b_{g}").shape != shape_b for g in GATES):
            raise ShapeError("gate bias vectors must share one shape")
        if shape_b != (shape_w[0], 1) or shape_w[1] <= shape_w[0]:
            raise ShapeError(f"inconsistent layer shapes W{shape_w} b{shape_b}")

    @property
    def hidden(self) -> int:
        return self.W_f.shape[0]

    @property
    def input_dim(self) -> int:
        return self.W_f.shape[1] - self.W_f.shape[0]

    def matrices(self) -> list[Matrix]:
        return [self.W_f, self.W_i, self.W_c, self.W_o, self.b_f, self.b_i, self.b_c, self.b_o]

    def stacked(self) -> tuple[Matrix, Matrix]:
        return (
            np.vstack([self.W_f, self.W_i, self.W_c, self.W_o]),
            np.vstack([self.b_f, self.b_i, self.b_c, self.b_o]),
        )

    @classmethod
    def zeros(cls, input_dim: int, hidden: int) -> "LstmLayerParams":
        w = [zeros(hidden, hidden + input_dim) for _ in GATES]
        b = [zeros(hidden, 1) for _ in GATES]
        return cls(*w, *b)


@dataclass
class ModelWeights:
    """All parameters of the network; also used to hold gradients and deltas."""

    layers: list[LstmLayerParams]
    fc_weight: Matrix
    fc_bias: Matrix
    head: str = "reconstruction"

    def __post_init__(self):
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}")
        if not self.layers:
            raise ShapeError("at least one LSTM layer is required")
        for below, above in zip(self.layers, self.layers[1:]):
            if above.input_dim != below.hidden:
                raise ShapeError("layer input dim must equal hidden size of the layer below")
        top = self.layers[-1].hidden
        out = 1 if self.head == "classifier" else self.features
        if self.fc_weight.shape != (out, top) or self.fc_bias.shape != (out, 1):
            raise ShapeError(
                f"FC head shape {self.fc_weight.shape}/{self.fc_bias.shape} "
                f"does not match head={self.head} out={out} hidden={top}"
            )

    @property
    def features(self) -> int:
        return self.layers[0].input_dim

    @property
    def hidden(self) -> int:
        return self.layers[0].hidden

    @property
    def out_dim(self) -> int:
        return self.fc_weight.shape[0]

    def matrices(self) -> list[Matrix]:
        """Every parameter matrix in canonical order."""
        mats = []
        for layer in self.layers:
            mats.extend(layer.matrices())
        mats.extend([self.fc_weight, self.fc_bias])
        return mats

    def parameter_count(self) -> int:
        return sum(m.size for m in self.matrices())

    def map(self, fn, *others: "ModelWeights") -> "ModelWeights":
        """Apply ``fn`` matrix-wise across this and congruent weight sets."""
        mats = [self.matrices()] + [o.matrices() for o in others]
        for group in mats[1:]:
            if [m.shape for m in group] != [m.shape for m in mats[0]]:
                raise ShapeError("weight sets are not shape-congruent")
        new = [fn(*ms) for ms in zip(*mats)]
        return self.from_matrices(new)

    def from_matrices(self, mats: Sequence[Matrix]) -> "ModelWeights":
        """Rebuild a ModelWeights with this structure from matrices in canonical order."""
        it = iter(mats)
        layers = [LstmLayerParams(*[next(it) for _ in range(8)]) for _ in self.layers]
        fc_w = next(it)
        fc_b = next(it)
        return ModelWeights(layers, fc_w, fc_b, self.head)

    def copy(self) -> "ModelWeights":
        return self.map(np.copy)

    def flat(self) -> np.ndarray:
        return np.concatenate([m.ravel() for m in self.matrices()])

    def same_shape(self, other: "ModelWeights") -> bool:
        return self.head == other.head and [m.shape for m in self.matrices()] == [
            m.shape for m in other.matrices()
        ]

    def bitwise_equal(self, other: "ModelWeights") -> bool:
        return self.same_shape(other) and all(
            a.tobytes() == b.tobytes() for a, b in zip(self.matrices(), other.matrices())
        )

    @classmethod
    def zeros(cls, features: int, hidden: int, layers: int = 2, head: str = "reconstruction"):
        params = [LstmLayerParams.zeros(features if k == 0 else hidden, hidden) for k in range(layers)]
        out = 1 if head == "classifier" else features
        return cls(params, zeros(out, hidden), zeros(out, 1), head)

    @classmethod
    def initialize(
        cls,
        features: int,
        hidden: int,
        rng: SeededRng,
        layers: int = 2,
        head: str = "reconstruction",
        scale: float = INIT_SCALE,
    ) -> "ModelWeights":
        """Uniform(-scale, scale) init, drawn matrix by matrix in canonical order."""
        template = cls.zeros(features, hidden, layers, head)
        return template.from_matrices(
            [init_uniform(m.shape[0], m.shape[1], scale, rng) for m in template.matrices()]
        )


Gradient = ModelWeights


@dataclass
class CellState:
    h: Matrix
    c: Matrix

    @classmethod
    def zeros(cls, hidden: int, batch: int = 1) -> "CellState":
        return cls(zeros(hidden, batch), zeros(hidden, batch))


@dataclass
class CellCache:
    z: Matrix  # [h_prev; x]
    c_prev: Matrix
    f: Matrix
    i: Matrix
    g: Matrix  # candidate cell state
    o: Matrix
    c: Matrix
    tanh_c: Matrix
    h: Matrix


def _cell(x: Matrix, prev: CellState, W: Matrix, b: Matrix, hidden: int) -> tuple[CellState, CellCache]:
    z = np.vstack([prev.h, x])
    a = matmul(W, z) + b
    f = sigmoid(a[:hidden])
    i = sigmoid(a[hidden : 2 * hidden])
    g = np.tanh(a[2 * hidden : 3 * hidden])
    o = sigmoid(a[3 * hidden :])
    c = f * prev.c + i * g
    tanh_c = np.tanh(c)
    h = o * tanh_c
    return CellState(h, c), CellCache(z, prev.c, f, i, g, o, c, tanh_c, h)


def cell_forward(x_t: Matrix, prev: CellState, p: LstmLayerParams) -> tuple[CellState, CellCache]:
    """One LSTM step. ``x_t`` is input_dim x batch (batch is usually 1)."""
    if x_t.ndim != 2 or x_t.shape[0] != p.input_dim:
        raise ShapeError(f"cell input {x_t.shape} does not match input dim {p.input_dim}")
    if prev.h.shape != (p.hidden, x_t.shape[1]) or prev.c.shape != prev.h.shape:
        raise ShapeError("previous state does not match hidden size / batch")
    W, b = p.stacked()
    return _cell(x_t, prev, W, b, p.hidden)


@dataclass
class ForwardCache:
    weights: ModelWeights
    inputs: np.ndarray  # batch x 4 x d
    caches: list[list[CellCache]]  # [layer][t]
    output: np.ndarray  # batch x 4 x d (reconstruction) or batch x 1 x 1
    head: str = field(init=False)

    def __post_init__(self):
        self.head = self.weights.head


def _as_batch(windows) -> np.ndarray:
    x = np.asarray(windows, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[1] != WINDOW_LENGTH:
        raise WindowError(f"windows must have exactly {WINDOW_LENGTH} timesteps, got shape {x.shape}")
    return x


def forward_batch(windows, w: ModelWeights) -> ForwardCache:
    """Forward pass over a batch of windows shaped batch x 4 x d."""
    x = _as_batch(windows)
    batch, steps, d = x.shape
    if d != w.features:
        raise ShapeError(f"window has {d} features, model expects {w.features}")
    seq = [np.ascontiguousarray(x[:, t, :].T) for t in range(steps)]
    caches = []
    for layer in w.layers:
        W, b = layer.stacked()
        state = CellState.zeros(layer.hidden, batch)
        layer_caches = []
        outputs = []
        for t in range(steps):
            state, cache = _cell(seq[t], state, W, b, layer.hidden)
            layer_caches.append(cache)
            outputs.append(state.h)
        caches.append(layer_caches)
        seq = outputs
    if w.head == "reconstruction":
        ys = [sigmoid(matmul(w.fc_weight, h) + w.fc_bias) for h in seq]
        out = np.stack([y.T for y in ys], axis=1)
    else:
        y = sigmoid(matmul(w.fc_weight, seq[-1]) + w.fc_bias)
        out = y.T[:, :, None]
    return ForwardCache(w, x, caches, out)


def forward(window, w: ModelWeights) -> tuple[Matrix, ForwardCache]:
    """Single window forward. Output is 4 x d (reconstruction) or 1 x 1 (classifier)."""
    cache = forward_batch(window, w)
    if cache.inputs.shape[0] != 1:
        raise WindowError("forward takes exactly one window; use forward_batch")
    return cache.output[0], cache


def loss(output: Matrix, target: Matrix, head: str) -> float:
    output = np.asarray(output, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if output.shape != target.shape:
        raise ShapeError(f"loss: output {output.shape} vs target {target.shape}")
    if np.any(target < 0) or np.any(target > 1):
        raise DomainError("loss targets must lie in [0, 1]")
    if head == "reconstruction":
        return float(np.mean((output - target) ** 2))
    if head == "classifier":
        p = np.clip(output, BCE_EPS, 1 - BCE_EPS)
        return float(np.mean(-(target * np.log(p) + (1 - target) * np.log(1 - p))))
    raise ValueError(f"unknown head {head!r}")


def _targets(cache: ForwardCache, target) -> np.ndarray:
    t = np.asarray(target, dtype=np.float64)
    if t.ndim == cache.output.ndim - 1:
        t = t[None]
    if t.shape != cache.output.shape:
        raise ShapeError(f"target {t.shape} does not match output {cache.output.shape}")
    return t


def batch_loss(cache: ForwardCache, target) -> float:
    """Mean over the batch of the per-window loss."""
    t = _targets(cache, target)
    return float(np.mean([loss(y, ty, cache.head) for y, ty in zip(cache.output, t)]))


def backward(cache: ForwardCache, target) -> Gradient:
    """Exact gradient of ``batch_loss`` w.r.t. every parameter (BPTT over the window)."""
    w = cache.weights
    t = _targets(cache, target)
    y = cache.output
    batch = y.shape[0]
    steps = WINDOW_LENGTH
    top = cache.caches[-1]

    # d loss / d pre-activation of the FC head, one (out x batch) matrix per step
    if cache.head == "reconstruction":
        per_window = y.shape[1] * y.shape[2]
        dz_out = 2.0 * (y - t) * y * (1.0 - y) / (per_window * batch)
        dz_steps = [np.ascontiguousarray(dz_out[:, s, :].T) for s in range(steps)]
    else:
        active = (y > BCE_EPS) & (y < 1 - BCE_EPS)
        dz = np.where(active, y - t, 0.0) / batch
        dz_steps = [None] * (steps - 1) + [np.ascontiguousarray(dz[:, :, 0].T)]

    d_fc_w = zeros(*w.fc_weight.shape)
    d_fc_b = zeros(*w.fc_bias.shape)
    dh_seq = []
    for s in range(steps):
        dz = dz_steps[s]
        if dz is None:
            dh_seq.append(zeros(w.layers[-1].hidden, batch))
            continue
        d_fc_w += matmul(dz, top[s].h.T)
        d_fc_b += dz.sum(axis=1, keepdims=True)
        dh_seq.append(matmul(w.fc_weight.T, dz))

    layer_grads = []
    for k in range(len(w.layers) - 1, -1, -1):
        layer = w.layers[k]
        hidden = layer.hidden
        W, _ = layer.stacked()
        dW = zeros(*W.shape)
        db = zeros(4 * hidden, 1)
        dh_next = zeros(hidden, batch)
        dc_next = zeros(hidden, batch)
        dx_seq = [None] * steps
        for s in range(steps - 1, -1, -1):
            cc = cache.caches[k][s]
            dh = dh_seq[s] + dh_next
            do = dh * cc.tanh_c
            dc = dc_next + dh * cc.o * (1.0 - cc.tanh_c**2)
            df = dc * cc.c_prev
            di = dc * cc.g
            dg = dc * cc.i
            da = np.vstack(
                [
                    df * cc.f * (1.0 - cc.f),
                    di * cc.i * (1.0 - cc.i),
                    dg * (1.0 - cc.g**2),
                    do * cc.o * (1.0 - cc.o),
                ]
            )
            dW += matmul(da, cc.z.T)
            db += da.sum(axis=1, keepdims=True)
            dzcat = matmul(W.T, da)
            dh_next = dzcat[:hidden]
            dx_seq[s] = dzcat[hidden:]
            dc_next = dc * cc.f
        dh_seq = dx_seq
        layer_grads.append(
            LstmLayerParams(
                *[dW[j * hidden : (j + 1) * hidden] for j in range(4)],
                *[db[j * hidden : (j + 1) * hidden] for j in range(4)],
            )
        )
    layer_grads.reverse()
    return ModelWeights(layer_grads, d_fc_w, d_fc_b, w.head)


def sgd_step(w: ModelWeights, g: Gradient, lr: float) -> ModelWeights:
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    return w.map(lambda p, dp: p - lr * dp, g)


def window_target(window, head: str) -> np.ndarray:
    """Training target for a window: its own values, or its label as a 1x1 matrix."""
    if head == "reconstruction":
        return np.asarray(window.x, dtype=np.float64)
    return np.array([[float(window.y)]])


def minibatches(n: int, size: int, rng: SeededRng) -> Iterator[np.ndarray]:
    order = rng.permutation(n)
    for start in range(0, n, size):
        yield order[start : start + size]


def train_local_with_history(
    data: Sequence, w_start: ModelWeights, J: int, H: int, lr: float, rng: SeededRng
) -> tuple[ModelWeights, list[float]]:
    """Client update: H epochs of shuffled minibatch SGD.

    Returns the trained weights and the mean minibatch loss of every epoch
    (losses are measured on the forward pass that produced each step).
    """
    if J < 1 or H < 1:
        raise ValueError("minibatch size J and epochs H must be >= 1")
    if not data:
        raise EmptyDatasetError("no training windows")
    head = w_start.head
    xs = np.stack([np.asarray(win.x, dtype=np.float64) for win in data])
    ts = np.stack([window_target(win, head) for win in data])
    w = w_start.copy()
    history = []
    for _ in range(H):
        losses = []
        for idx in minibatches(len(data), J, rng):
            cache = forward_batch(xs[idx], w)
            losses.append(batch_loss(cache, ts[idx]))
            if lr > 0:
                w = sgd_step(w, backward(cache, ts[idx]), lr)
        history.append(float(np.mean(losses)))
    return w, history


def train_local(data: Sequence, w_start: ModelWeights, J: int, H: int, lr: float, rng: SeededRng) -> ModelWeights:
    return train_local_with_history(data, w_start, J, H, lr, rng)[0]

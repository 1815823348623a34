"""Independent reference implementations used to check the package.

Nothing here imports the package's numerical code: each oracle re-derives its
result from the defining formulas with plain Python floats or a separate
numpy formulation, so a shared bug cannot make both sides agree.
"""
from __future__ import annotations

import math

import numpy as np


def sig(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x))


def scalar_cell(x, h_prev, c_prev, W_f, W_i, W_c, W_o, b_f, b_i, b_c, b_o):
    """One LSTM step written unit by unit; gate weights act on [h_prev, x]."""
    z = [float(v) for v in h_prev] + [float(v) for v in x]
    hidden = len(h_prev)

    def pre(W, b, j):
        return sum(float(W[j][k]) * z[k] for k in range(len(z))) + float(b[j][0])

    h, c = [], []
    for j in range(hidden):
        f = sig(pre(W_f, b_f, j))
        i = sig(pre(W_i, b_i, j))
        g = math.tanh(pre(W_c, b_c, j))
        o = sig(pre(W_o, b_o, j))
        cj = f * float(c_prev[j]) + i * g
        c.append(cj)
        h.append(o * math.tanh(cj))
    return h, c


def scalar_forward(window, layers, fc_w, fc_b, head):
    """Chain ``scalar_cell`` over 4 timesteps and 2+ layers, then the FC head."""
    seq = [list(map(float, row)) for row in window]
    for p in layers:
        hidden = len(p[4])
        h, c = [0.0] * hidden, [0.0] * hidden
        out = []
        for x in seq:
            h, c = scalar_cell(x, h, c, *p)
            out.append(h)
        seq = out

    def fc(h):
        return [sig(sum(float(fc_w[r][k]) * h[k] for k in range(len(h))) + float(fc_b[r][0])) for r in range(len(fc_w))]

    if head == "classifier":
        return [fc(seq[-1])]
    return [fc(h) for h in seq]


# --- batched loss over many parameter vectors (finite-difference oracle) -------


def _sigm(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def layout(features: int, hidden: int, layers: int, head: str):
    """Shapes of the flat parameter vector: per layer 4 gate matrices then 4 biases, then FC."""
    shapes = []
    for k in range(layers):
        inp = features if k == 0 else hidden
        shapes += [(hidden, hidden + inp)] * 4 + [(hidden, 1)] * 4
    out = 1 if head == "classifier" else features
    shapes += [(out, hidden), (out, 1)]
    return shapes


def batched_loss(theta: np.ndarray, window: np.ndarray, target: np.ndarray, features, hidden, layers, head):
    """Loss for each row of ``theta`` (K x P) on one window, vectorised over K."""
    K = theta.shape[0]
    mats, pos = [], 0
    for r, c in layout(features, hidden, layers, head):
        mats.append(theta[:, pos : pos + r * c].reshape(K, r, c))
        pos += r * c
    seq = [np.broadcast_to(window[t], (K, features)) for t in range(4)]
    for k in range(layers):
        Wf, Wi, Wc, Wo, bf, bi, bc, bo = mats[8 * k : 8 * k + 8]
        h = np.zeros((K, hidden))
        c = np.zeros((K, hidden))
        out = []
        for x in seq:
            z = np.concatenate([h, x], axis=1)
            f = _sigm(np.einsum("kij,kj->ki", Wf, z) + bf[:, :, 0])
            i = _sigm(np.einsum("kij,kj->ki", Wi, z) + bi[:, :, 0])
            g = np.tanh(np.einsum("kij,kj->ki", Wc, z) + bc[:, :, 0])
            o = _sigm(np.einsum("kij,kj->ki", Wo, z) + bo[:, :, 0])
            c = f * c + i * g
            h = o * np.tanh(c)
            out.append(h)
        seq = out
    fw, fb = mats[-2], mats[-1]
    if head == "classifier":
        p = _sigm(np.einsum("kij,kj->ki", fw, seq[-1]) + fb[:, :, 0])[:, 0]
        p = np.clip(p, 1e-12, 1 - 1e-12)
        y = float(target)
        return -(y * np.log(p) + (1 - y) * np.log(1 - p))
    ys = np.stack([_sigm(np.einsum("kij,kj->ki", fw, h) + fb[:, :, 0]) for h in seq], axis=1)
    return np.mean((ys - target[None]) ** 2, axis=(1, 2))


def central_difference(theta: np.ndarray, window, target, features, hidden, layers, head, step=1e-5):
    n = theta.size
    eye = np.eye(n) * step
    plus = batched_loss(theta[None] + eye, window, target, features, hidden, layers, head)
    minus = batched_loss(theta[None] - eye, window, target, features, hidden, layers, head)
    return (plus - minus) / (2 * step)


# --- aggregation ---------------------------------------------------------------


def flat_weighted_mean(params: list[np.ndarray], sizes: list[int]) -> np.ndarray:
    """sum_n (D_n / D) w_n, accumulated in the given order."""
    total = sum(sizes)
    acc = (sizes[0] / total) * params[0]
    for p, s in zip(params[1:], sizes[1:]):
        acc = acc + (s / total) * p
    return acc


def flat_round(scenario, clients, group_weights, q, train_local, rng_factory):
    """One round of the flat algorithm: every member of a group trains from the
    group model and the server takes sum_n (D_n / D) w_n over the whole group,
    clients visited in id order. ``group_weights`` maps group -> (members, flat
    start vector, unflatten). Returns group -> new flat vector.
    """
    t = scenario.training
    out = {}
    for group, (members, start, unflatten) in group_weights.items():
        trained, sizes = [], []
        for cid in sorted(members):
            data = clients[cid].train
            w = train_local(data, unflatten(start), t.batch_size, t.local_epochs, t.lr, rng_factory(cid, q))
            trained.append(w.flat())
            sizes.append(len(data))
        out[group] = flat_weighted_mean(trained, sizes)
    return out


def quantile_interp(values, q):
    xs = sorted(values)
    pos = (len(xs) - 1) * q
    lo = int(math.floor(pos))
    hi = min(lo + 1, len(xs) - 1)
    return xs[lo] + (xs[hi] - xs[lo]) * (pos - lo)


def confusion(pred, truth):
    tp = fp = fn = tn = 0
    for p, t in zip(pred, truth):
        if p and t:
            tp += 1
        elif p and not t:
            fp += 1
        elif t:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn

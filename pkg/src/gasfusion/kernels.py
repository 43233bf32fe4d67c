"""Forward and analytic backward passes for every layer the models use.

Each forward returns ``(output, tape)``; the matching backward takes the
output gradient and that tape. A tape may be consumed once. Inputs may
carry a leading batch axis (conv/pool ``[N, C, H, W]``, dense ``[N, in]``,
LSTM ``[N, T, in]``) or be a single sample without it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    EmptySequence,
    InvalidLabel,
    InvalidRate,
    ShapeMismatch,
    TapeMismatch,
)
from .tensor import Rng


@dataclass
class Tape:
    """Cached forward intermediates for one layer call."""

    kind: str
    out_shape: tuple
    data: dict = field(default_factory=dict)
    consumed: bool = False

    def take(self, kind: str, dy: np.ndarray) -> dict:
        if self.kind != kind:
            raise TapeMismatch(f"{kind} backward given a {self.kind} tape")
        if self.consumed:
            raise TapeMismatch(f"{kind} tape already consumed")
        if dy.shape != self.out_shape:
            raise TapeMismatch(f"{kind} backward: gradient {dy.shape} vs output {self.out_shape}")
        self.consumed = True
        return self.data


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------


@dataclass
class ConvParams:
    kernels: np.ndarray  # [outC, inC, kH, kW]
    bias: np.ndarray  # [outC]
    stride: int = 1
    l1: float = 0.0
    l2: float = 0.0

    def __post_init__(self):
        if self.kernels.ndim != 4 or self.bias.shape != (self.kernels.shape[0],):
            raise ShapeMismatch(f"kernels {self.kernels.shape} / bias {self.bias.shape}")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")


def _batched(x: np.ndarray, ndim: int) -> tuple[np.ndarray, bool]:
    if x.ndim == ndim:
        return x[None], True
    if x.ndim == ndim + 1:
        return x, False
    raise ShapeMismatch(f"expected {ndim}-D sample or {ndim + 1}-D batch, got {x.shape}")


def conv2d_forward(x: np.ndarray, p: ConvParams):
    """Valid cross-correlation of ``x`` with every kernel plus bias."""
    xb, single = _batched(x, 3)
    n, c, h, w = xb.shape
    oc, ic, kh, kw = p.kernels.shape
    if ic != c:
        raise ShapeMismatch(f"input has {c} channels, kernels expect {ic}")
    if kh > h or kw > w:
        raise ShapeMismatch(f"kernel {kh}x{kw} larger than input {h}x{w}")
    s = p.stride
    ho, wo = (h - kh) // s + 1, (w - kw) // s + 1
    win = sliding_window_view(xb, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
    # [N, Ho, Wo, C*kh*kw] columns
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, ho, wo, c * kh * kw)
    kmat = p.kernels.reshape(oc, -1)
    y = (cols @ kmat.T + p.bias).transpose(0, 3, 1, 2)
    y = np.ascontiguousarray(y)
    if single:
        y = y[0]
    tape = Tape("conv2d", y.shape, {"cols": cols, "x_shape": xb.shape, "kernels": p.kernels,
                                    "stride": s, "single": single})
    return y, tape


def conv2d_backward(dy: np.ndarray, tape: Tape):
    """Return ``(dx, dkernels, dbias)``."""
    t = tape.take("conv2d", dy)
    dyb = dy[None] if t["single"] else dy
    kernels, s = t["kernels"], t["stride"]
    oc, ic, kh, kw = kernels.shape
    n, c, h, w = t["x_shape"]
    ho, wo = dyb.shape[2], dyb.shape[3]
    dy_flat = dyb.transpose(0, 2, 3, 1).reshape(-1, oc)
    dk = (dy_flat.T @ t["cols"].reshape(-1, c * kh * kw)).reshape(kernels.shape)
    db = dyb.sum(axis=(0, 2, 3))
    dcols = (dy_flat @ kernels.reshape(oc, -1)).reshape(n, ho, wo, c, kh, kw)
    dx = np.zeros((n, h, w, c))
    for i in range(kh):
        for j in range(kw):
            dx[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :] += dcols[:, :, :, :, i, j]
    dx = dx.transpose(0, 3, 1, 2)
    if t["single"]:
        dx = dx[0]
    return dx, dk, db


# --------------------------------------------------------------------------
# max pooling (2x2, stride 2)
# --------------------------------------------------------------------------


def maxpool2d(x: np.ndarray, window: int = 2, stride: int = 2):
    """Non-overlapping max pool. Ties go to the first maximum in row-major order."""
    if window != 2 or stride != 2:
        raise ValueError("only 2x2 windows with stride 2 are supported")
    xb, single = _batched(x, 3)
    n, c, h, w = xb.shape
    if h % 2 or w % 2:
        raise ShapeMismatch(f"max pool needs even extents, got {h}x{w}")
    # window cells in row-major order; strict '>' keeps the first maximum
    y = xb[:, :, 0::2, 0::2]
    arg = np.zeros(y.shape, dtype=np.int8)
    for k, (di, dj) in enumerate(((0, 1), (1, 0), (1, 1)), start=1):
        cand = xb[:, :, di::2, dj::2]
        better = cand > y
        y = np.where(better, cand, y)
        arg = np.where(better, np.int8(k), arg)
    if single:
        y = y[0]
    return y, Tape("maxpool2d", y.shape, {"arg": arg, "x_shape": xb.shape, "single": single})


def maxpool2d_backward(dy: np.ndarray, tape: Tape) -> np.ndarray:
    t = tape.take("maxpool2d", dy)
    dyb = dy[None] if t["single"] else dy
    arg = t["arg"]
    dx = np.zeros(t["x_shape"])
    for k, (di, dj) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
        dx[:, :, di::2, dj::2] = np.where(arg == k, dyb, 0.0)
    return dx[0] if t["single"] else dx


# --------------------------------------------------------------------------
# dense
# --------------------------------------------------------------------------


@dataclass
class DenseParams:
    weights: np.ndarray  # [in, out]
    bias: np.ndarray  # [out]
    l1: float = 0.0
    l2: float = 0.0

    def __post_init__(self):
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[1],):
            raise ShapeMismatch(f"weights {self.weights.shape} / bias {self.bias.shape}")


def dense(x: np.ndarray, p: DenseParams):
    if x.shape[-1] != p.weights.shape[0] or x.ndim not in (1, 2):
        raise ShapeMismatch(f"dense input {x.shape} vs weights {p.weights.shape}")
    y = x @ p.weights + p.bias
    return y, Tape("dense", y.shape, {"x": x, "weights": p.weights})


def dense_backward(dy: np.ndarray, tape: Tape):
    """Return ``(dx, dweights, dbias)``."""
    t = tape.take("dense", dy)
    x, wts = t["x"], t["weights"]
    dx = dy @ wts.T
    if x.ndim == 1:
        return dx, np.outer(x, dy), dy.copy()
    return dx, x.T @ dy, dy.sum(axis=0)


# --------------------------------------------------------------------------
# activations
# --------------------------------------------------------------------------


def sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


_ACTIVATIONS = {
    "relu": lambda z: np.maximum(z, 0.0),
    "sigmoid": sigmoid,
    "tanh": np.tanh,
}


def activation(x: np.ndarray, kind: str):
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    y = fn(x)
    return y, Tape(kind, y.shape, {"x": x, "y": y})


def activation_backward(dy: np.ndarray, tape: Tape) -> np.ndarray:
    kind = tape.kind
    if kind not in _ACTIVATIONS:
        raise TapeMismatch(f"{kind} is not an activation tape")
    t = tape.take(kind, dy)
    if kind == "relu":
        return dy * (t["x"] > 0)
    y = t["y"]
    if kind == "sigmoid":
        return dy * y * (1.0 - y)
    return dy * (1.0 - y * y)


def relu(x):
    return activation(x, "relu")


# --------------------------------------------------------------------------
# dropout
# --------------------------------------------------------------------------


@dataclass
class DropoutState:
    rate: float
    training: bool = False

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise InvalidRate(f"dropout rate must be in [0, 1), got {self.rate}")


def dropout(x: np.ndarray, state: DropoutState, rng: Rng | None = None):
    """Inverted dropout: survivors are scaled by 1/(1-rate) while training."""
    if not state.training or state.rate == 0.0:
        return x, Tape("dropout", x.shape, {"mask": None})
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    keep = rng.random(x.shape) >= state.rate
    mask = keep / (1.0 - state.rate)
    return x * mask, Tape("dropout", x.shape, {"mask": mask})


def dropout_backward(dy: np.ndarray, tape: Tape) -> np.ndarray:
    mask = tape.take("dropout", dy)["mask"]
    return dy if mask is None else dy * mask


# --------------------------------------------------------------------------
# LSTM
# --------------------------------------------------------------------------

GATES = ("i", "f", "o", "g")


@dataclass
class LstmParams:
    """Per-gate input weights ``W``, recurrent weights ``U`` and biases ``b``.

    Gate order is input, forget, output, candidate.
    """

    W: dict  # gate -> [inDim, hidden]
    U: dict  # gate -> [hidden, hidden]
    b: dict  # gate -> [hidden]
    l2: float = 0.0

    def __post_init__(self):
        d, hdim = self.W["i"].shape
        for g in GATES:
            if self.W[g].shape != (d, hdim) or self.U[g].shape != (hdim, hdim) or self.b[g].shape != (hdim,):
                raise ShapeMismatch(f"gate {g} has inconsistent shapes")

    @property
    def in_dim(self) -> int:
        return self.W["i"].shape[0]

    @property
    def hidden(self) -> int:
        return self.W["i"].shape[1]

    def stacked(self):
        W = np.concatenate([self.W[g] for g in GATES], axis=1)
        U = np.concatenate([self.U[g] for g in GATES], axis=1)
        b = np.concatenate([self.b[g] for g in GATES])
        return W, U, b

    @classmethod
    def zeros(cls, in_dim: int, hidden: int, l2: float = 0.0) -> "LstmParams":
        return cls(
            W={g: np.zeros((in_dim, hidden)) for g in GATES},
            U={g: np.zeros((hidden, hidden)) for g in GATES},
            b={g: np.zeros(hidden) for g in GATES},
            l2=l2,
        )


def _lstm_cell(x_t, h_prev, c_prev, W, U, b):
    hd = U.shape[0]
    z = x_t @ W + h_prev @ U + b
    sg = sigmoid(z[..., : 3 * hd])
    i, f, o = sg[..., :hd], sg[..., hd:2 * hd], sg[..., 2 * hd:]
    g = np.tanh(z[..., 3 * hd:])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    return h, c, {"x": x_t, "h_prev": h_prev, "c_prev": c_prev, "i": i, "f": f, "o": o, "g": g, "tc": tc}


def _lstm_cell_backward(dh, dc, cache, W, U):
    i, f, o, g, tc = cache["i"], cache["f"], cache["o"], cache["g"], cache["tc"]
    do = dh * tc
    dc = dc + dh * o * (1.0 - tc * tc)
    dz = np.concatenate(
        [dc * g * i * (1.0 - i), dc * cache["c_prev"] * f * (1.0 - f), do * o * (1.0 - o), dc * i * (1.0 - g * g)],
        axis=-1,
    )
    x, hp = cache["x"], cache["h_prev"]
    if x.ndim == 1:
        dW, dU, db = np.outer(x, dz), np.outer(hp, dz), dz
    else:
        dW, dU, db = x.T @ dz, hp.T @ dz, dz.sum(axis=0)
    return dz @ W.T, dz @ U.T, dc * f, dW, dU, db


def _split_grads(dW, dU, db, hd):
    out = {}
    for k, g in enumerate(GATES):
        sl = slice(k * hd, (k + 1) * hd)
        out[f"W_{g}"] = dW[:, sl]
        out[f"U_{g}"] = dU[:, sl]
        out[f"b_{g}"] = db[sl]
    return out


def lstm_step(x_t, h_prev, c_prev, p: LstmParams):
    """One gated step; returns ``(h_t, c_t, tape)``."""
    if x_t.shape[-1] != p.in_dim or h_prev.shape[-1] != p.hidden or c_prev.shape != h_prev.shape:
        raise ShapeMismatch(f"lstm step shapes x{x_t.shape} h{h_prev.shape} c{c_prev.shape}")
    W, U, b = p.stacked()
    h, c, cache = _lstm_cell(x_t, h_prev, c_prev, W, U, b)
    tape = Tape("lstm_step", h.shape, {"cache": cache, "W": W, "U": U})
    return h, c, tape


def lstm_step_backward(dh, dc, tape: Tape):
    """Return ``(dx, dh_prev, dc_prev, grads)`` with grads keyed ``W_i``, ``U_f``, ..."""
    t = tape.take("lstm_step", dh)
    dx, dhp, dcp, dW, dU, db = _lstm_cell_backward(dh, dc, t["cache"], t["W"], t["U"])
    return dx, dhp, dcp, _split_grads(dW, dU, db, t["U"].shape[0])


def lstm_sequence(xs: np.ndarray, p: LstmParams):
    """Run the cell over ``xs`` ([T, in] or [N, T, in]) from zero state; return the last hidden state."""
    if xs.ndim not in (2, 3):
        raise ShapeMismatch(f"lstm sequence must be [T, in] or [N, T, in], got {xs.shape}")
    steps = xs.shape[-2]
    if steps == 0:
        raise EmptySequence("lstm sequence has no steps")
    if xs.shape[-1] != p.in_dim:
        raise ShapeMismatch(f"lstm input dim {xs.shape[-1]} vs params {p.in_dim}")
    W, U, b = p.stacked()
    state_shape = xs.shape[:-2] + (p.hidden,)
    h = np.zeros(state_shape)
    c = np.zeros(state_shape)
    caches = []
    for t in range(steps):
        h, c, cache = _lstm_cell(xs[..., t, :], h, c, W, U, b)
        caches.append(cache)
    return h, Tape("lstm_sequence", h.shape, {"caches": caches, "W": W, "U": U, "xs_shape": xs.shape})


def lstm_backward(dh_T: np.ndarray, tape: Tape):
    """Full backpropagation through time. Returns ``(dxs, grads)``."""
    t = tape.take("lstm_sequence", dh_T)
    W, U = t["W"], t["U"]
    dxs = np.zeros(t["xs_shape"])
    dW, dU = np.zeros_like(W), np.zeros_like(U)
    db = np.zeros(W.shape[1])
    dh, dc = dh_T, np.zeros_like(dh_T)
    for step in range(len(t["caches"]) - 1, -1, -1):
        dx, dh, dc, gW, gU, gb = _lstm_cell_backward(dh, dc, t["caches"][step], W, U)
        dxs[..., step, :] = dx
        dW += gW
        dU += gU
        db += gb
    return dxs, _split_grads(dW, dU, db, U.shape[0])


# --------------------------------------------------------------------------
# softmax + cross-entropy
# --------------------------------------------------------------------------


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent(logits: np.ndarray, label):
    """Return ``(probs, loss, dlogits)``.

    For a batch ``[N, K]`` with ``N`` labels the loss is the batch mean and
    ``dlogits`` is scaled accordingly.
    """
    k = logits.shape[-1]
    labels = np.asarray(label, dtype=np.int64)
    if labels.shape != logits.shape[:-1]:
        raise ShapeMismatch(f"labels {labels.shape} for logits {logits.shape}")
    if np.any(labels < 0) or np.any(labels >= k):
        raise InvalidLabel(f"label out of range for {k} classes: {label}")
    probs = softmax(logits)
    z = logits - logits.max(axis=-1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    onehot = np.eye(k)[labels]
    if logits.ndim == 1:
        return probs, float(-log_probs[labels]), probs - onehot
    n = logits.shape[0]
    loss = float(-np.take_along_axis(log_probs, labels[:, None], axis=1).mean())
    return probs, loss, (probs - onehot) / n

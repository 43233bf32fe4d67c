"""GasCNN, GasLSTM and the early-fusion network, late-fusion rules, and the training loop.

Every model ends in a 4-way softmax. Parameters live in a flat dict keyed
by dotted names (``cnn.conv1.kernels``, ``lstm.W_f``, ``head.bias``), which
is also the order-independent layout of the model file.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import kernels as K
from .data import ADC_MAX, SENSOR_NAMES, GasClass, rescale, resize
from .errors import EmptyDataset, InvalidDistribution, InvalidShape, ModalityMissing
from .optim import AdamState, TrainConfig, adam_step, reg_loss_and_grad
from .tensor import Rng

KINDS = ("cnn", "lstm", "early-fusion")
N_CLASSES = len(GasClass)
_INIT_KEY = 0x1A17
_TRAIN_KEY = 0x7EA1


@dataclass(frozen=True)
class CnnSpec:
    input_size: tuple = (30, 30)
    filters: tuple = (8, 16, 32)
    kernel_size: int = 3
    reg_l1: float = 0.005
    reg_l2: float = 0.005
    reg_blocks: int = 2
    dropout: float = 0.25
    feature_dim: int = 32
    n_classes: int = N_CLASSES

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        object.__setattr__(self, "filters", tuple(int(v) for v in self.filters))
        if len(self.filters) != 3:
            raise ValueError("the CNN has exactly three conv-pool blocks")
        if not 0 <= self.reg_blocks <= 3:
            raise ValueError("reg_blocks must be between 0 and 3")
        K.DropoutState(self.dropout)
        self.trunk_shape()

    def trunk_shape(self) -> tuple:
        """Shape ``(C, H, W)`` after the last pool; raises if a pool sees an odd extent."""
        h, w = self.input_size
        for f in self.filters:
            h, w = h - self.kernel_size + 1, w - self.kernel_size + 1
            if h < 2 or w < 2 or h % 2 or w % 2:
                raise InvalidShape(f"input {self.input_size} gives a {h}x{w} map before pooling")
            h, w = h // 2, w // 2
        return (self.filters[-1], h, w)


@dataclass(frozen=True)
class LstmSpec:
    seq_len: int = len(SENSOR_NAMES)
    in_dim: int = 1
    hidden: int = 5
    l2: float = 0.005
    feature_dim: int = 32
    n_classes: int = N_CLASSES

    def __post_init__(self):
        if self.seq_len * self.in_dim != len(SENSOR_NAMES):
            raise ValueError("the sensor sequence carries 7 readings")
        if self.hidden < 1:
            raise ValueError("hidden must be positive")


@dataclass(frozen=True)
class FusionSpec:
    cnn: CnnSpec = field(default_factory=CnnSpec)
    lstm: LstmSpec = field(default_factory=LstmSpec)
    merged_dim: int = 32
    n_classes: int = N_CLASSES

    def __post_init__(self):
        if isinstance(self.cnn, dict):
            object.__setattr__(self, "cnn", CnnSpec(**self.cnn))
        if isinstance(self.lstm, dict):
            object.__setattr__(self, "lstm", LstmSpec(**self.lstm))
        if self.cnn.feature_dim != self.lstm.feature_dim:
            raise ValueError("both branches must emit features of the same dimension")


_SPEC_TYPES = {"cnn": CnnSpec, "lstm": LstmSpec, "early-fusion": FusionSpec}


def default_spec(kind: str):
    return _SPEC_TYPES[_check_kind(kind)]()


def spec_to_dict(spec) -> dict:
    return asdict(spec)


def spec_from_dict(kind: str, d: dict):
    return _SPEC_TYPES[_check_kind(kind)](**d)


def _check_kind(kind: str) -> str:
    if kind not in KINDS:
        raise ValueError(f"unknown model kind {kind!r}; expected one of {KINDS}")
    return kind


@dataclass
class ModelBundle:
    kind: str
    spec: object
    params: dict
    adam: AdamState | None = None
    meta: dict = field(default_factory=dict)

    def modalities(self) -> tuple:
        return {"cnn": ("thermal",), "lstm": ("sensor",), "early-fusion": ("thermal", "sensor")}[self.kind]


# --------------------------------------------------------------------------
# initialization
# --------------------------------------------------------------------------


def _glorot(rng: Rng, shape, fan_in: int, fan_out: int) -> np.ndarray:
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, shape)


def _init_cnn(rng: Rng, spec: CnnSpec, params: dict, head: bool) -> None:
    k = spec.kernel_size
    in_c = 1
    for b, f in enumerate(spec.filters, 1):
        params[f"cnn.conv{b}.kernels"] = _glorot(rng, (f, in_c, k, k), in_c * k * k, f * k * k)
        params[f"cnn.conv{b}.bias"] = np.zeros(f)
        in_c = f
    flat = math.prod(spec.trunk_shape())
    params["cnn.feature.weights"] = _glorot(rng, (flat, spec.feature_dim), flat, spec.feature_dim)
    params["cnn.feature.bias"] = np.zeros(spec.feature_dim)
    if head:
        _init_dense(rng, params, "head", spec.feature_dim, spec.n_classes)


def _init_lstm(rng: Rng, spec: LstmSpec, params: dict, head: bool) -> None:
    d, hd = spec.in_dim, spec.hidden
    for g in K.GATES:
        params[f"lstm.W_{g}"] = _glorot(rng, (d, hd), d, hd)
    for g in K.GATES:
        params[f"lstm.U_{g}"] = _glorot(rng, (hd, hd), hd, hd)
    for g in K.GATES:
        # forget gate starts open
        params[f"lstm.b_{g}"] = np.ones(hd) if g == "f" else np.zeros(hd)
    _init_dense(rng, params, "lstm.feature", hd, spec.feature_dim)
    if head:
        _init_dense(rng, params, "head", spec.feature_dim, spec.n_classes)


def _init_dense(rng: Rng, params: dict, prefix: str, n_in: int, n_out: int) -> None:
    params[f"{prefix}.weights"] = _glorot(rng, (n_in, n_out), n_in, n_out)
    params[f"{prefix}.bias"] = np.zeros(n_out)


def init_bundle(kind: str, spec=None, seed: int = 7) -> ModelBundle:
    """Fresh bundle with Glorot-uniform weights drawn from ``seed``."""
    spec = default_spec(kind) if spec is None else spec
    rng = Rng.derive(seed, _INIT_KEY)
    params: dict = {}
    if kind == "cnn":
        _init_cnn(rng, spec, params, head=True)
    elif kind == "lstm":
        _init_lstm(rng, spec, params, head=True)
    else:
        _init_cnn(rng, spec.cnn, params, head=False)
        _init_lstm(rng, spec.lstm, params, head=False)
        _init_dense(rng, params, "fusion.dense", 2 * spec.cnn.feature_dim, spec.merged_dim)
        _init_dense(rng, params, "head", spec.merged_dim, spec.n_classes)
    return ModelBundle(kind, spec, params, None, {"seed": int(seed), "epochs_run": 0})


def regularizers(kind: str, spec) -> dict:
    """Parameter name -> (l1, l2) for every penalized tensor."""
    regs = {}
    cnn = spec if kind == "cnn" else getattr(spec, "cnn", None)
    lstm = spec if kind == "lstm" else getattr(spec, "lstm", None)
    if cnn is not None:
        for b in range(1, cnn.reg_blocks + 1):
            regs[f"cnn.conv{b}.kernels"] = (cnn.reg_l1, cnn.reg_l2)
    if lstm is not None:
        for g in K.GATES:
            regs[f"lstm.W_{g}"] = (0.0, lstm.l2)
            regs[f"lstm.U_{g}"] = (0.0, lstm.l2)
    return regs


# --------------------------------------------------------------------------
# input encoding
# --------------------------------------------------------------------------


@dataclass
class Batch:
    images: np.ndarray | None  # [N, 1, H, W] in [0, 1]
    sensors: np.ndarray | None  # [N, T, in] in [0, 1]
    labels: np.ndarray | None  # [N]

    def __len__(self):
        arr = self.images if self.images is not None else self.sensors
        return 0 if arr is None else arr.shape[0]

    def take(self, idx) -> "Batch":
        return Batch(
            None if self.images is None else self.images[idx],
            None if self.sensors is None else self.sensors[idx],
            None if self.labels is None else self.labels[idx],
        )


def thermal_input(frame, size: tuple) -> np.ndarray:
    """Downsample a frame to the model resolution and scale to [0, 1]; returns [1, H, W]."""
    px = frame.pixels if hasattr(frame, "pixels") else np.asarray(frame)
    if px.shape != tuple(size):
        px = resize(px, *size)
    return rescale(px)[None]


def sensor_input(frame, spec: LstmSpec) -> np.ndarray:
    adc = np.asarray(frame.adc if hasattr(frame, "adc") else frame, dtype=np.float64)
    return (adc / ADC_MAX).reshape(spec.seq_len, spec.in_dim)


def _branch_specs(kind: str, spec):
    if kind == "cnn":
        return spec, None
    if kind == "lstm":
        return None, spec
    return spec.cnn, spec.lstm


def encode(samples: Sequence, kind: str, spec, with_labels: bool = True) -> Batch:
    """Stack model inputs for ``samples``; raises ModalityMissing when a needed modality is absent."""
    cnn, lstm = _branch_specs(kind, spec)
    images = sensors = None
    if cnn is not None:
        if any(getattr(s, "thermal", None) is None for s in samples):
            raise ModalityMissing(f"{kind} model needs a thermal image")
        images = np.stack([thermal_input(s.thermal, cnn.input_size) for s in samples]) if samples else None
    if lstm is not None:
        if any(getattr(s, "sensor", None) is None for s in samples):
            raise ModalityMissing(f"{kind} model needs gas sensor readings")
        sensors = np.stack([sensor_input(s.sensor, lstm) for s in samples]) if samples else None
    labels = np.array([int(s.label) for s in samples], dtype=np.int64) if with_labels else None
    return Batch(images, sensors, labels)


# --------------------------------------------------------------------------
# forward / backward
# --------------------------------------------------------------------------


def _dense_p(params, prefix):
    return K.DenseParams(params[f"{prefix}.weights"], params[f"{prefix}.bias"])


def _cnn_trunk(params, spec: CnnSpec, x, training, rng):
    tapes = []
    h = x
    for b in range(1, len(spec.filters) + 1):
        cp = K.ConvParams(params[f"cnn.conv{b}.kernels"], params[f"cnn.conv{b}.bias"])
        h, tc = K.conv2d_forward(h, cp)
        h, ta = K.relu(h)
        h, tp = K.maxpool2d(h)
        tapes.append((tc, ta, tp))
    h, td = K.dropout(h, K.DropoutState(spec.dropout, training), rng)
    pooled_shape = h.shape
    h, tf = K.dense(h.reshape(h.shape[0], -1), _dense_p(params, "cnn.feature"))
    h, tr = K.relu(h)
    return h, (tapes, td, pooled_shape, tf, tr)


def _cnn_trunk_back(dfeat, tape, grads):
    tapes, td, pooled_shape, tf, tr = tape
    d = K.activation_backward(dfeat, tr)
    d, grads["cnn.feature.weights"], grads["cnn.feature.bias"] = K.dense_backward(d, tf)
    d = K.dropout_backward(d.reshape(pooled_shape), td)
    for b in range(len(tapes), 0, -1):
        tc, ta, tp = tapes[b - 1]
        d = K.maxpool2d_backward(d, tp)
        d = K.activation_backward(d, ta)
        d, grads[f"cnn.conv{b}.kernels"], grads[f"cnn.conv{b}.bias"] = K.conv2d_backward(d, tc)


def lstm_params(params: dict, spec: LstmSpec) -> K.LstmParams:
    return K.LstmParams(
        W={g: params[f"lstm.W_{g}"] for g in K.GATES},
        U={g: params[f"lstm.U_{g}"] for g in K.GATES},
        b={g: params[f"lstm.b_{g}"] for g in K.GATES},
        l2=spec.l2,
    )


def _lstm_trunk(params, spec: LstmSpec, xs):
    h, tl = K.lstm_sequence(xs, lstm_params(params, spec))
    h, tf = K.dense(h, _dense_p(params, "lstm.feature"))
    h, tr = K.relu(h)
    return h, (tl, tf, tr)


def _lstm_trunk_back(dfeat, tape, grads):
    tl, tf, tr = tape
    d = K.activation_backward(dfeat, tr)
    d, grads["lstm.feature.weights"], grads["lstm.feature.bias"] = K.dense_backward(d, tf)
    _, g = K.lstm_backward(d, tl)
    for name, v in g.items():
        grads[f"lstm.{name}"] = v


def fused_logits(params: dict, f_cnn: np.ndarray, f_lstm: np.ndarray):
    """Early-fusion head over already-extracted branch features."""
    merged = np.concatenate([f_cnn, f_lstm], axis=-1)
    h, t1 = K.dense(merged, _dense_p(params, "fusion.dense"))
    h, t2 = K.relu(h)
    logits, t3 = K.dense(h, _dense_p(params, "head"))
    return logits, (t1, t2, t3, f_cnn.shape[-1])


def branch_features(bundle: ModelBundle, batch: Batch) -> tuple:
    """Inference-mode (cnn, lstm) feature vectors of an early-fusion bundle."""
    f_cnn, _ = _cnn_trunk(bundle.params, bundle.spec.cnn, batch.images, False, None)
    f_lstm, _ = _lstm_trunk(bundle.params, bundle.spec.lstm, batch.sensors)
    return f_cnn, f_lstm


def forward_logits(kind: str, spec, params: dict, batch: Batch, training: bool = False, rng: Rng | None = None):
    if kind == "cnn":
        f, tt = _cnn_trunk(params, spec, batch.images, training, rng)
        logits, th = K.dense(f, _dense_p(params, "head"))
        return logits, (tt, th)
    if kind == "lstm":
        f, tt = _lstm_trunk(params, spec, batch.sensors)
        logits, th = K.dense(f, _dense_p(params, "head"))
        return logits, (tt, th)
    f_cnn, tc = _cnn_trunk(params, spec.cnn, batch.images, training, rng)
    f_lstm, tl = _lstm_trunk(params, spec.lstm, batch.sensors)
    logits, th = fused_logits(params, f_cnn, f_lstm)
    return logits, (tc, tl, th)


def backward(kind: str, dlogits: np.ndarray, tape) -> dict:
    grads: dict = {}
    if kind in ("cnn", "lstm"):
        tt, th = tape
        d, grads["head.weights"], grads["head.bias"] = K.dense_backward(dlogits, th)
        (_cnn_trunk_back if kind == "cnn" else _lstm_trunk_back)(d, tt, grads)
        return grads
    tc, tl, (t1, t2, t3, split_at) = tape
    d, grads["head.weights"], grads["head.bias"] = K.dense_backward(dlogits, t3)
    d = K.activation_backward(d, t2)
    d, grads["fusion.dense.weights"], grads["fusion.dense.bias"] = K.dense_backward(d, t1)
    _cnn_trunk_back(d[:, :split_at], tc, grads)
    _lstm_trunk_back(d[:, split_at:], tl, grads)
    return grads


def predict_proba(bundle: ModelBundle, data, chunk: int = 512) -> np.ndarray:
    """Inference-mode class probabilities ``[N, 4]`` for samples or an encoded Batch."""
    batch = data if isinstance(data, Batch) else encode(list(data), bundle.kind, bundle.spec, with_labels=False)
    out = []
    for start in range(0, len(batch), chunk):
        logits, _ = forward_logits(bundle.kind, bundle.spec, bundle.params, batch.take(slice(start, start + chunk)))
        out.append(K.softmax(logits))
    return np.concatenate(out) if out else np.zeros((0, N_CLASSES))


def forward(bundle: ModelBundle, sample) -> np.ndarray:
    """Class probabilities for one sample (anything with ``.thermal`` / ``.sensor``)."""
    return predict_proba(bundle, [sample])[0]


# --------------------------------------------------------------------------
# late fusion and decision
# --------------------------------------------------------------------------


def _check_simplex(p: np.ndarray, name: str) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim not in (1, 2) or not np.all(np.isfinite(p)) or np.any(p < 0):
        raise InvalidDistribution(f"{name} is not a probability vector")
    if np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-6):
        raise InvalidDistribution(f"{name} does not sum to 1")
    return p


def late_fuse_max(pa, pb) -> np.ndarray:
    """Elementwise maximum of two predictions, renormalized to sum to 1."""
    pa, pb = _check_simplex(pa, "first prediction"), _check_simplex(pb, "second prediction")
    if pa.shape != pb.shape:
        raise InvalidDistribution(f"prediction shapes differ: {pa.shape} vs {pb.shape}")
    m = np.maximum(pa, pb)
    return m / m.sum(axis=-1, keepdims=True)


def late_fuse_avg(pa, pb) -> np.ndarray:
    """Arithmetic mean of two predictions."""
    pa, pb = _check_simplex(pa, "first prediction"), _check_simplex(pb, "second prediction")
    if pa.shape != pb.shape:
        raise InvalidDistribution(f"prediction shapes differ: {pa.shape} vs {pb.shape}")
    return (pa + pb) / 2.0


LATE_RULES = {"max": late_fuse_max, "avg": late_fuse_avg}


def predict_class(probs) -> GasClass:
    """Argmax; ties resolve to the lowest class index."""
    return GasClass(int(np.argmax(np.asarray(probs))))


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


def _copy_state(state: AdamState | None, params: dict) -> AdamState:
    if state is None:
        return AdamState.for_params(params)
    return AdamState({k: v.copy() for k, v in state.m.items()}, {k: v.copy() for k, v in state.v.items()}, state.t)


def evaluate_batch(bundle_or_kind, spec, params, batch: Batch, chunk: int = 512) -> tuple[float, float]:
    """Mean cross-entropy and accuracy in inference mode."""
    total_loss, correct = 0.0, 0
    for start in range(0, len(batch), chunk):
        part = batch.take(slice(start, start + chunk))
        logits, _ = forward_logits(bundle_or_kind, spec, params, part)
        probs, loss, _ = K.softmax_xent(logits, part.labels)
        total_loss += loss * len(part)
        correct += int((probs.argmax(axis=1) == part.labels).sum())
    n = len(batch)
    return total_loss / n, correct / n


def train(bundle: ModelBundle, train_set, val_set=(), cfg: TrainConfig | None = None,
          log: Callable[[str], None] | None = None):
    """Minimize mean cross-entropy plus penalties with Adam.

    Returns ``(trained_bundle, history)``; history has one record per epoch
    with the running train loss/accuracy (training mode) and the val
    loss/accuracy (inference mode). The input bundle is not modified.
    """
    cfg = cfg or TrainConfig()
    train_set, val_set = list(train_set), list(val_set)
    if not train_set:
        raise EmptyDataset("training set is empty")
    if cfg.batch_size > len(train_set):
        raise ValueError(f"batch size {cfg.batch_size} exceeds {len(train_set)} training samples")
    if {s.id for s in train_set} & {s.id for s in val_set}:
        raise ValueError("training and validation sets overlap")
    kind, spec = bundle.kind, bundle.spec
    tb = encode(train_set, kind, spec)
    vb = encode(val_set, kind, spec) if val_set else None
    params = {k: v.copy() for k, v in bundle.params.items()}
    state = _copy_state(bundle.adam, params)
    regs = regularizers(kind, spec)
    rng = Rng.derive(cfg.seed, _TRAIN_KEY, int(bundle.meta.get("epochs_run", 0)))
    n = len(tb)
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        loss_sum, pen_sum, correct, steps = 0.0, 0.0, 0, 0
        for start in range(0, n, cfg.batch_size):
            part = tb.take(order[start:start + cfg.batch_size])
            logits, tape = forward_logits(kind, spec, params, part, training=True, rng=rng)
            probs, loss, dlogits = K.softmax_xent(logits, part.labels)
            grads = backward(kind, dlogits, tape)
            penalty, pgrads = reg_loss_and_grad(params, regs)
            for name, g in pgrads.items():
                grads[name] = grads[name] + g
            params = adam_step(params, grads, state, cfg)
            loss_sum += loss * len(part)
            pen_sum += penalty
            correct += int((probs.argmax(axis=1) == part.labels).sum())
            steps += 1
        rec = {
            "epoch": int(bundle.meta.get("epochs_run", 0)) + epoch + 1,
            "train_loss": loss_sum / n,
            "train_accuracy": correct / n,
            "penalty": pen_sum / steps,
            "val_loss": None,
            "val_accuracy": None,
        }
        if vb is not None:
            rec["val_loss"], rec["val_accuracy"] = evaluate_batch(kind, spec, params, vb)
        history.append(rec)
        if log is not None:
            val = "" if vb is None else f" val_loss={rec['val_loss']:.4f} val_acc={rec['val_accuracy']:.4f}"
            log(f"[{kind}] epoch {rec['epoch']}: loss={rec['train_loss']:.4f} acc={rec['train_accuracy']:.4f}{val}")
    meta = dict(bundle.meta)
    meta["seed"] = int(cfg.seed)
    meta["epochs_run"] = int(bundle.meta.get("epochs_run", 0)) + cfg.epochs
    if history:
        meta["final"] = {k: v for k, v in history[-1].items() if k != "epoch"}
    return ModelBundle(kind, spec, params, state if cfg.epochs else bundle.adam, meta), history

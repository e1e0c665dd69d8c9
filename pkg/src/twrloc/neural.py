"""Dense neural networks from scratch: forward/backward, Adam, training.

Layers are dense (y = f(Wx + b), W stored out-by-in) and inverted dropout
(active only while training). The loss is mean squared logarithmic error
over raw centimeter coordinates. Everything is float64 numpy and fully
deterministic given the seeds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .container import read_container, write_container

MSLE_PRED_FLOOR = -1.0 + 1e-7
DEFAULT_DROPOUT_RATE = 0.2
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-7
HIT_TOLERANCE_CM = 5.0

_MODEL_MAGIC = b"TWRM"


class TrainingDiverged(RuntimeError):
    """Loss stopped being finite during training."""

    def __init__(self, epoch: int, history=None):
        super().__init__(f"non-finite loss at epoch {epoch}")
        self.epoch = epoch
        self.history = history  # completed epochs before the divergence


class CheckpointError(ValueError):
    """Checkpoint file unreadable or incompatible."""


@dataclass(frozen=True)
class DenseSpec:
    width: int
    activation: str  # "relu" or "linear"


@dataclass(frozen=True)
class DropoutSpec:
    rate: float


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    layers: tuple

    def __post_init__(self):
        for layer in self.layers:
            if isinstance(layer, DenseSpec):
                if layer.activation not in ("relu", "linear"):
                    raise ValueError(f"unsupported activation {layer.activation!r}")
            elif isinstance(layer, DropoutSpec):
                if not 0.0 <= layer.rate < 1.0:
                    raise ValueError("dropout rate must be in [0, 1)")
            else:
                raise ValueError(f"unsupported layer {layer!r}")

    @property
    def output_dim(self) -> int:
        dense = [l for l in self.layers if isinstance(l, DenseSpec)]
        return dense[-1].width if dense else self.input_dim


def build_single_target_model(dropout_rate: float = DEFAULT_DROPOUT_RATE) -> ModelSpec:
    """9-layer regressor for one target: 285 -> 284 -> 300x3 -> 2."""
    d = DropoutSpec(dropout_rate)
    return ModelSpec(285, (
        DenseSpec(284, "relu"), d,
        DenseSpec(300, "relu"), d,
        DenseSpec(300, "relu"), d,
        DenseSpec(300, "relu"), d,
        DenseSpec(2, "linear"),
    ))


def build_two_target_model(dropout_rate: float = DEFAULT_DROPOUT_RATE) -> ModelSpec:
    """12-layer regressor for two targets: 285 -> 285 -> 300x5 -> 4."""
    d = DropoutSpec(dropout_rate)
    return ModelSpec(285, (
        DenseSpec(285, "relu"), d,
        DenseSpec(300, "relu"), d,
        DenseSpec(300, "relu"), d,
        DenseSpec(300, "relu"), d,
        DenseSpec(300, "relu"), d,
        DenseSpec(300, "relu"),
        DenseSpec(4, "linear"),
    ))


def layer_parameter_counts(spec: ModelSpec) -> list[int]:
    """Trainable parameters per layer (dense: in*out + out, dropout: 0)."""
    counts = []
    fan_in = spec.input_dim
    for layer in spec.layers:
        if isinstance(layer, DenseSpec):
            counts.append(fan_in * layer.width + layer.width)
            fan_in = layer.width
        else:
            counts.append(0)
    return counts


def parameter_count(spec: ModelSpec) -> int:
    return sum(layer_parameter_counts(spec))


def init_params(spec: ModelSpec, seed) -> list[tuple[np.ndarray, np.ndarray]]:
    """Fan-scaled uniform weights (limit sqrt(6/(fan_in+fan_out))), zero biases."""
    rng = np.random.default_rng(seed)
    params = []
    fan_in = spec.input_dim
    for layer in spec.layers:
        if isinstance(layer, DenseSpec):
            limit = math.sqrt(6.0 / (fan_in + layer.width))
            w = rng.uniform(-limit, limit, size=(layer.width, fan_in))
            b = np.zeros(layer.width)
            params.append((w, b))
            fan_in = layer.width
    return params


def _check_params(spec: ModelSpec, params) -> None:
    dense = [l for l in spec.layers if isinstance(l, DenseSpec)]
    if len(params) != len(dense):
        raise ValueError(f"expected {len(dense)} dense parameter pairs, got {len(params)}")
    fan_in = spec.input_dim
    for k, (layer, (w, b)) in enumerate(zip(dense, params)):
        if w.shape != (layer.width, fan_in) or b.shape != (layer.width,):
            raise ValueError(f"parameter shapes for dense layer {k} do not match the spec")
        fan_in = layer.width


def _forward(spec: ModelSpec, params, x: np.ndarray, training: bool, rng) -> tuple[np.ndarray, dict]:
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ValueError(f"batch shape {x.shape} incompatible with input_dim {spec.input_dim}")
    _check_params(spec, params)
    inputs = []       # dense-layer inputs, in order
    pre = []          # dense-layer pre-activations
    masks = []        # dropout masks aligned with dropout layers, or None
    a = x
    k = 0
    for layer in spec.layers:
        if isinstance(layer, DenseSpec):
            w, b = params[k]
            inputs.append(a)
            z = a @ w.T + b
            pre.append(z)
            a = np.maximum(z, 0.0) if layer.activation == "relu" else z
            k += 1
        else:
            if training and layer.rate > 0.0:
                keep = 1.0 - layer.rate
                mask = (rng.random(a.shape) < keep) / keep
                a = a * mask
                masks.append(mask)
            else:
                masks.append(None)
    cache = {"x": x, "inputs": inputs, "pre": pre, "masks": masks,
             "output": a, "squeeze": squeeze}
    return a, cache


def forward(spec: ModelSpec, params, batch: np.ndarray, training: bool = False,
            seed=None) -> tuple[np.ndarray, dict]:
    """Forward pass; dropout is applied only when ``training`` is true.

    Returns (outputs, cache); the cache feeds :func:`backward`. Evaluation
    passes ignore the seed entirely.
    """
    rng = np.random.default_rng(seed) if training else None
    out, cache = _forward(spec, params, batch, training, rng)
    if cache["squeeze"]:
        out = out[0]
    return out, cache


def msle(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    """Mean over all elements of (log(y+1) - log(yhat+1))^2.

    Predictions are floored at -1 + 1e-7 before the log; true values are
    assumed non-negative (coordinates in cm).
    """
    y_true = np.asarray(y_true, dtype=float)
    y_pred = np.maximum(np.asarray(y_pred, dtype=float), MSLE_PRED_FLOOR)
    r = np.log1p(y_true) - np.log1p(y_pred)
    return float(np.mean(r * r))


def _msle_grad(y_true: np.ndarray, y_pred: np.ndarray) -> np.ndarray:
    """d msle / d y_pred; zero where the prediction floor clamps."""
    y_true = np.asarray(y_true, dtype=float)
    y_pred = np.asarray(y_pred, dtype=float)
    clamped = np.maximum(y_pred, MSLE_PRED_FLOOR)
    r = np.log1p(y_true) - np.log1p(clamped)
    grad = -2.0 * r / ((clamped + 1.0) * y_true.size)
    return np.where(y_pred > MSLE_PRED_FLOOR, grad, 0.0)


def backward(spec: ModelSpec, params, cache: dict, y_true: np.ndarray) -> list:
    """Exact MSLE gradients for every (W, b), replaying dropout masks."""
    y_true = np.asarray(y_true, dtype=float)
    if y_true.ndim == 1:
        y_true = y_true[None, :]
    out = cache["output"]
    if y_true.shape != out.shape:
        raise ValueError(f"labels shape {y_true.shape} does not match outputs {out.shape}")
    dense = [l for l in spec.layers if isinstance(l, DenseSpec)]
    n_dense = len(dense)
    if len(cache["inputs"]) != n_dense or len(cache["pre"]) != n_dense:
        raise ValueError("cache does not match the model spec (stale forward pass?)")

    grads: list = [None] * n_dense
    delta = _msle_grad(y_true, out)
    k = n_dense - 1
    mask_idx = len(cache["masks"]) - 1
    for layer in reversed(spec.layers):
        if isinstance(layer, DenseSpec):
            z = cache["pre"][k]
            a_in = cache["inputs"][k]
            if layer.activation == "relu":
                delta = delta * (z > 0.0)
            dw = delta.T @ a_in
            db = delta.sum(axis=0)
            grads[k] = (dw, db)
            delta = delta @ params[k][0]
            k -= 1
        else:
            mask = cache["masks"][mask_idx]
            if mask is not None:
                delta = delta * mask
            mask_idx -= 1
    return grads


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS


def adam_init(params, beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2,
              eps: float = ADAM_EPS) -> AdamState:
    m = [(np.zeros_like(w), np.zeros_like(b)) for w, b in params]
    v = [(np.zeros_like(w), np.zeros_like(b)) for w, b in params]
    return AdamState(m=m, v=v, t=0, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(params, grads, state: AdamState, lr: float):
    """Bias-corrected Adam update; returns new (params, state)."""
    t = state.t + 1
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    new_params, new_m, new_v = [], [], []
    for (p_w, p_b), (g_w, g_b), (m_w, m_b), (v_w, v_b) in zip(params, grads, state.m, state.v):
        updated = []
        ms, vs = [], []
        for p, g, m, v in ((p_w, g_w, m_w, v_w), (p_b, g_b, m_b, v_b)):
            m_new = state.beta1 * m + (1.0 - state.beta1) * g
            v_new = state.beta2 * v + (1.0 - state.beta2) * (g * g)
            step = lr * (m_new / c1) / (np.sqrt(v_new / c2) + state.eps)
            updated.append(p - step)
            ms.append(m_new)
            vs.append(v_new)
        new_params.append((updated[0], updated[1]))
        new_m.append((ms[0], ms[1]))
        new_v.append((vs[0], vs[1]))
    return new_params, AdamState(m=new_m, v=new_v, t=t, beta1=state.beta1,
                                 beta2=state.beta2, eps=state.eps)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 30
    max_epochs: int = 5000
    rng_seed: int = 0
    use_dropout: bool = True
    early_stop_enabled: bool = False
    patience: int = 100
    restore_best: bool = True
    hit_tolerance_cm: float = HIT_TOLERANCE_CM

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_hit_acc: float
    val_loss: float
    val_hit_acc: float


@dataclass
class History:
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def final(self) -> EpochRecord:
        return self.records[-1]

    def best_val_epoch(self) -> int:
        losses = [r.val_loss for r in self.records]
        return int(np.argmin(losses))

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("epoch,train_loss,train_hit_acc,val_loss,val_hit_acc\n")
            for r in self.records:
                fh.write(f"{r.epoch},{r.train_loss!r},{r.train_hit_acc!r},"
                         f"{r.val_loss!r},{r.val_hit_acc!r}\n")


def _evaluate(spec, params, x, y, tol_cm) -> tuple[float, float]:
    out, _ = _forward(spec, params, x, training=False, rng=None)
    return msle(y, out), hit_accuracy(out, y, tol_cm)


def _copy_params(params):
    return [(w.copy(), b.copy()) for w, b in params]


def train(spec: ModelSpec, dataset, config: TrainConfig,
          init: list | None = None) -> tuple[list, History]:
    """Mini-batch Adam training with per-epoch train/val metrics.

    ``dataset`` must expose split_arrays(split) returning standardized
    features and raw cm labels. Metrics are computed in evaluation mode
    (no dropout) at the end of each epoch. Early stopping watches the
    validation loss and restores the best weights when enabled.
    """
    x_tr, y_tr = dataset.split_arrays("train")
    x_val, y_val = dataset.split_arrays("val")
    n = x_tr.shape[0]
    if n == 0:
        raise ValueError("training split is empty")
    if config.early_stop_enabled and x_val.shape[0] == 0:
        raise ValueError("early stopping requires a non-empty validation split")

    root = np.random.SeedSequence(config.rng_seed)
    init_ss, loop_ss = root.spawn(2)
    params = _copy_params(init) if init is not None else init_params(spec, init_ss)
    _check_params(spec, params)
    rng = np.random.default_rng(loop_ss)
    state = adam_init(params)
    history = History()
    best_loss = math.inf
    best_params = None
    epochs_since_best = 0

    for epoch in range(config.max_epochs):
        perm = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            _, cache = _forward(spec, params, x_tr[idx], config.use_dropout, rng)
            grads = backward(spec, params, cache, y_tr[idx])
            params, state = adam_step(params, grads, state, config.learning_rate)

        train_loss, train_acc = _evaluate(spec, params, x_tr, y_tr, config.hit_tolerance_cm)
        if x_val.shape[0]:
            val_loss, val_acc = _evaluate(spec, params, x_val, y_val, config.hit_tolerance_cm)
        else:
            val_loss, val_acc = math.nan, math.nan
        if not math.isfinite(train_loss) or (x_val.shape[0] and not math.isfinite(val_loss)):
            raise TrainingDiverged(epoch, history)
        history.records.append(EpochRecord(epoch, train_loss, train_acc, val_loss, val_acc))

        if config.early_stop_enabled:
            if val_loss < best_loss:
                best_loss = val_loss
                best_params = _copy_params(params)
                epochs_since_best = 0
            else:
                epochs_since_best += 1
                if epochs_since_best >= config.patience:
                    break

    if config.early_stop_enabled and config.restore_best and best_params is not None:
        params = best_params
    return params, history


def predict(spec: ModelSpec, params, features: np.ndarray, standardizer=None) -> np.ndarray:
    """Coordinates (cm) for raw or standardized features.

    When a (mean, std) standardizer is given, it is applied to the
    features first.
    """
    features = np.asarray(features, dtype=float)
    if standardizer is not None:
        mean, std = standardizer
        features = (features - mean) / std
    out, _ = forward(spec, params, features, training=False)
    return out


def hit_accuracy(preds: np.ndarray, truths: np.ndarray, tol_cm: float = HIT_TOLERANCE_CM) -> float:
    """Fraction of samples whose every target lands within tol_cm (Euclidean).

    Two-target predictions are paired with truths positionally (both in
    canonical pair order).
    """
    if tol_cm <= 0:
        raise ValueError("tol_cm must be positive")
    preds = np.atleast_2d(np.asarray(preds, dtype=float))
    truths = np.atleast_2d(np.asarray(truths, dtype=float))
    if preds.shape != truths.shape:
        raise ValueError(f"prediction shape {preds.shape} != truth shape {truths.shape}")
    if preds.shape[1] % 2 != 0:
        raise ValueError("coordinate arrays must have an even number of columns")
    k = preds.shape[1] // 2
    p = preds.reshape(len(preds), k, 2)
    t = truths.reshape(len(truths), k, 2)
    dist = np.sqrt(np.sum((p - t) ** 2, axis=2))
    return float(np.mean(np.all(dist <= tol_cm, axis=1)))


def save_model(path, spec: ModelSpec, params, standardizer=None) -> None:
    """Versioned binary checkpoint: layer table, weights, standardizer."""
    _check_params(spec, params)
    layers = []
    for layer in spec.layers:
        if isinstance(layer, DenseSpec):
            layers.append({"kind": "dense", "width": layer.width, "activation": layer.activation})
        else:
            layers.append({"kind": "dropout", "rate": layer.rate})
    header = {
        "kind": "model",
        "input_dim": spec.input_dim,
        "layers": layers,
        "has_standardizer": standardizer is not None,
    }
    arrays = []
    for k, (w, b) in enumerate(params):
        arrays.append((f"w{k}", w))
        arrays.append((f"b{k}", b))
    if standardizer is not None:
        arrays.append(("std_mean", standardizer[0]))
        arrays.append(("std_std", standardizer[1]))
    write_container(path, _MODEL_MAGIC, header, arrays)


def load_model(path):
    """Returns (spec, params, standardizer-or-None)."""
    try:
        header, arrays = read_container(path, _MODEL_MAGIC)
    except ValueError as exc:
        raise CheckpointError(str(exc)) from exc
    if header.get("kind") != "model":
        raise CheckpointError(f"{path}: not a model checkpoint")
    layers = []
    for entry in header["layers"]:
        if entry["kind"] == "dense":
            layers.append(DenseSpec(entry["width"], entry["activation"]))
        elif entry["kind"] == "dropout":
            layers.append(DropoutSpec(entry["rate"]))
        else:
            raise CheckpointError(f"{path}: unknown layer kind {entry['kind']!r}")
    spec = ModelSpec(header["input_dim"], tuple(layers))
    n_dense = sum(1 for l in spec.layers if isinstance(l, DenseSpec))
    try:
        params = [(arrays[f"w{k}"], arrays[f"b{k}"]) for k in range(n_dense)]
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing weight block {exc}") from exc
    standardizer = None
    if header.get("has_standardizer"):
        standardizer = (arrays["std_mean"], arrays["std_std"])
    try:
        _check_params(spec, params)
    except ValueError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    return spec, params, standardizer

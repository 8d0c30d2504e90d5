"""Minimal deterministic training loop driving the layer-wise scheduler.

A small fully-connected network (optionally behind a conv stem) is trained
with SGD plus momentum and weight decay on synthetic or CSV data. Forward
and backward passes are written directly in numpy (conv as matmul over
flattened patches) so gradient checks against finite differences stay
meaningful. At every update-interval boundary the current weights are
snapshotted, analyzed, and the per-layer learning rates refreshed; biases
and other 1-D parameters always ride the global rate.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from time import perf_counter
from typing import Iterator, TextIO

import numpy as np

from .errors import ConfigError, DataError, NumericalError
from .esd import OrientedMatrix, orient_array
from .htsr import LambdaMinPolicy, power_iteration_sigma
from .scheduler import ScheduleConfig, ScheduleDecision, schedule_epoch
from .weight_store import LayerTensor, WeightSnapshot

ACTIVATIONS = ("relu", "tanh")
INIT_SCHEMES = ("he", "xavier")

TELEMETRY_HEADER = (
    "epoch,layer,alpha_hill,spectral_norm,lr,grad_l2,train_loss,eval_acc,analysis_sec,epoch_sec"
)


class DivergenceError(NumericalError):
    """Training loss became non-finite."""

    def __init__(self, epoch: int):
        super().__init__(f"training diverged at epoch {epoch} (non-finite loss)")
        self.epoch = epoch


class CsvParseError(DataError):
    """Malformed row or header in a CSV dataset."""


# ---------------------------------------------------------------------------
# model


@dataclass(frozen=True)
class ModelSpec:
    """Network shape: optional conv stem, then dense widths [in, h..., out]."""

    widths: tuple[int, ...]
    activation: str = "relu"
    init: str = "he"
    seed: int = 0
    conv_stem: tuple[tuple[int, int, int, int], ...] = ()
    conv_input: tuple[int, int, int] | None = None

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 3:
            raise ConfigError("need at least 2 dense layers (widths of length >= 3)")
        if any(w <= 0 for w in self.widths):
            raise ConfigError(f"widths must be positive, got {self.widths}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.init not in INIT_SCHEMES:
            raise ConfigError(f"unknown init scheme {self.init!r}")
        if self.conv_stem:
            if self.conv_input is None:
                raise ConfigError("conv_stem requires conv_input (channels, height, width)")
            c, h, w = conv_output_shape(self.conv_stem, self.conv_input)
            if c * h * w != self.widths[0]:
                raise ConfigError(
                    f"conv stem flattens to {c * h * w} features but widths[0] is {self.widths[0]}"
                )

    @property
    def input_dim(self) -> int:
        if self.conv_stem:
            c, h, w = self.conv_input
            return c * h * w
        return self.widths[0]


def conv_output_shape(
    conv_stem: tuple[tuple[int, int, int, int], ...],
    conv_input: tuple[int, int, int],
) -> tuple[int, int, int]:
    """Output (channels, h, w) of a valid-convolution stem, stride 1."""
    c, h, w = conv_input
    for idx, (out, cin, kh, kw) in enumerate(conv_stem):
        if cin != c:
            raise ConfigError(f"conv block {idx} expects {cin} input channels, previous stage has {c}")
        h, w = h - kh + 1, w - kw + 1
        if h <= 0 or w <= 0:
            raise ConfigError(f"conv block {idx} kernel ({kh}x{kw}) larger than its input")
        c = out
    return c, h, w


def init_params(spec: ModelSpec) -> dict[str, np.ndarray]:
    """Seeded parameter initialization; weight keys '<layer>.w', biases '<layer>.b'."""
    rng = np.random.default_rng(spec.seed)
    params: dict[str, np.ndarray] = {}

    def draw(shape, fan_in, fan_out):
        if spec.init == "he":
            return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, size=shape)

    for idx, (out, cin, kh, kw) in enumerate(spec.conv_stem):
        params[f"conv{idx}.w"] = draw((out, cin, kh, kw), cin * kh * kw, out * kh * kw)
        params[f"conv{idx}.b"] = np.zeros(out)
    for idx in range(len(spec.widths) - 1):
        fan_in, fan_out = spec.widths[idx], spec.widths[idx + 1]
        params[f"dense{idx}.w"] = draw((fan_out, fan_in), fan_in, fan_out)
        params[f"dense{idx}.b"] = np.zeros(fan_out)
    return params


def weight_layer_names(spec: ModelSpec) -> list[str]:
    names = [f"conv{i}" for i in range(len(spec.conv_stem))]
    names += [f"dense{i}" for i in range(len(spec.widths) - 1)]
    return names


def snapshot_params(params: dict[str, np.ndarray], spec: ModelSpec, epoch: int) -> WeightSnapshot:
    """Snapshot of the 2-D/4-D weight tensors (biases are not analyzed)."""
    layers = []
    for name in weight_layer_names(spec):
        w = params[f"{name}.w"]
        layers.append(LayerTensor(name=name, dims=w.shape, values=w.reshape(-1).copy()))
    return WeightSnapshot(epoch=epoch, layers=tuple(layers))


def _act(z: np.ndarray, kind: str) -> np.ndarray:
    return np.maximum(z, 0.0) if kind == "relu" else np.tanh(z)


def _act_grad(z: np.ndarray, a: np.ndarray, kind: str) -> np.ndarray:
    return (z > 0).astype(np.float64) if kind == "relu" else 1.0 - a * a


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """(B, C, H, W) -> (B*H'*W', C*kh*kw) patches for valid conv, stride 1."""
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    b, c, hp, wp = windows.shape[:4]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(b * hp * wp, c * kh * kw)
    return np.ascontiguousarray(cols)


def _col2im(dcols: np.ndarray, x_shape, kh: int, kw: int) -> np.ndarray:
    """Scatter-add patch gradients back onto the (B, C, H, W) input."""
    b, c, h, w = x_shape
    hp, wp = h - kh + 1, w - kw + 1
    dcols = dcols.reshape(b, hp, wp, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    dx = np.zeros(x_shape)
    for ki in range(kh):
        for kj in range(kw):
            dx[:, :, ki:ki + hp, kj:kj + wp] += dcols[:, :, :, :, ki, kj]
    return dx


def _forward(params, spec: ModelSpec, x: np.ndarray):
    """Logits plus the cache needed for the backward pass."""
    cache = {"conv": [], "dense": []}
    a = x
    if spec.conv_stem:
        c, h, w = spec.conv_input
        a = a.reshape(-1, c, h, w)
        for idx, (out, cin, kh, kw) in enumerate(spec.conv_stem):
            wmat = params[f"conv{idx}.w"].reshape(out, cin * kh * kw)
            cols = _im2col(a, kh, kw)
            hp, wp = a.shape[2] - kh + 1, a.shape[3] - kw + 1
            z = (cols @ wmat.T + params[f"conv{idx}.b"]).reshape(a.shape[0], hp, wp, out)
            z = z.transpose(0, 3, 1, 2)
            act = _act(z, spec.activation)
            cache["conv"].append((a.shape, cols, z, act))
            a = act
        a = a.reshape(a.shape[0], -1)
    n_dense = len(spec.widths) - 1
    for idx in range(n_dense):
        w = params[f"dense{idx}.w"]
        z = a @ w.T + params[f"dense{idx}.b"]
        if idx < n_dense - 1:
            act = _act(z, spec.activation)
        else:
            act = z
        cache["dense"].append((a, z, act))
        a = act
    return a, cache


def _softmax_ce(logits: np.ndarray, y: np.ndarray):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    expz = np.exp(shifted)
    probs = expz / expz.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    eps = np.finfo(np.float64).tiny
    loss = float(-np.mean(np.log(probs[np.arange(n), y] + eps)))
    dlogits = probs
    dlogits[np.arange(n), y] -= 1.0
    return loss, dlogits / n


def loss_and_grads(params, spec: ModelSpec, x: np.ndarray, y: np.ndarray):
    """Cross-entropy loss and analytic gradients for every parameter."""
    logits, cache = _forward(params, spec, x)
    loss, delta = _softmax_ce(logits, y)
    grads: dict[str, np.ndarray] = {}
    n_dense = len(spec.widths) - 1
    for idx in range(n_dense - 1, -1, -1):
        a_in, z, act = cache["dense"][idx]
        if idx < n_dense - 1:
            delta = delta * _act_grad(z, act, spec.activation)
        grads[f"dense{idx}.w"] = delta.T @ a_in
        grads[f"dense{idx}.b"] = delta.sum(axis=0)
        delta = delta @ params[f"dense{idx}.w"]
    if spec.conv_stem:
        c, h, w = conv_output_shape(spec.conv_stem, spec.conv_input)
        delta = delta.reshape(-1, c, h, w)
        for idx in range(len(spec.conv_stem) - 1, -1, -1):
            out, cin, kh, kw = spec.conv_stem[idx]
            x_shape, cols, z, act = cache["conv"][idx]
            delta = delta * _act_grad(z, act, spec.activation)
            dflat = delta.transpose(0, 2, 3, 1).reshape(-1, out)
            grads[f"conv{idx}.w"] = (dflat.T @ cols).reshape(out, cin, kh, kw)
            grads[f"conv{idx}.b"] = dflat.sum(axis=0)
            wmat = params[f"conv{idx}.w"].reshape(out, cin * kh * kw)
            delta = _col2im(dflat @ wmat, x_shape, kh, kw)
    return loss, grads


def predict(params, spec: ModelSpec, x: np.ndarray) -> np.ndarray:
    logits, _ = _forward(params, spec, x)
    return np.argmax(logits, axis=1)


def accuracy(params, spec: ModelSpec, x: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(predict(params, spec, x) == y))


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimState:
    """SGD hyperparameters and per-parameter momentum buffers."""

    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 128
    buffers: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    optim: OptimState,
    lr_map: dict[str, float],
) -> tuple[dict[str, np.ndarray], OptimState]:
    """v <- momentum*v + g + weight_decay*w; w <- w - lr*v, per parameter."""
    for name, w in params.items():
        g = grads[name]
        if g.shape != w.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {w.shape}")
        if name not in lr_map:
            raise ValueError(f"no learning rate for parameter {name}")
        buf = optim.buffers.get(name)
        if buf is None:
            buf = np.zeros_like(w)
        buf = optim.momentum * buf + g + optim.weight_decay * w
        optim.buffers[name] = buf
        params[name] = w - lr_map[name] * buf
    return params, optim


def snr_grad_term(
    layer: OrientedMatrix,
    lambda_sr: float,
    tol: float = 1e-9,
    max_iter: int = 10000,
) -> np.ndarray:
    """Gradient of the penalty (lambda_sr/2) * sigma(W)^2 at a simple top singular value.

    Returns lambda_sr * sigma * u v^T in the layer's original 2-D
    orientation (transposed layers get the transposed increment).
    """
    if lambda_sr < 0:
        raise ValueError(f"lambda_sr must be nonnegative, got {lambda_sr}")
    if lambda_sr == 0.0:
        shape = (layer.m, layer.n) if layer.transposed else (layer.n, layer.m)
        return np.zeros(shape)
    sigma, u, v = power_iteration_sigma(layer, tol=tol, max_iter=max_iter)
    inc = lambda_sr * sigma * np.outer(u, v)
    return inc.T if layer.transposed else inc


# ---------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class GaussianMixtureSpec:
    """Synthetic classification data: one Gaussian blob per class."""

    classes: int = 2
    dim: int = 20
    samples: int = 1000
    spread: float = 1.0
    separation: float = 4.0
    split: float = 0.8

    def __post_init__(self):
        if self.classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.classes}")
        if self.dim < 1 or self.samples < self.classes:
            raise ConfigError("each class needs at least one sample")
        if not 0.0 < self.split < 1.0:
            raise ConfigError(f"split must be in (0, 1), got {self.split}")
        if self.spread < 0 or self.separation < 0:
            raise ConfigError("spread and separation must be nonnegative")


@dataclass(frozen=True)
class CsvDataSpec:
    """Tabular classification data from a CSV file with a header row."""

    path: str
    label_column: str = "label"
    split: float = 0.8

    def __post_init__(self):
        if not 0.0 < self.split < 1.0:
            raise ConfigError(f"split must be in (0, 1), got {self.split}")


@dataclass
class Dataset:
    """Deterministic train/eval split with seeded per-epoch shuffling."""

    x_train: np.ndarray
    y_train: np.ndarray
    x_eval: np.ndarray
    y_eval: np.ndarray
    n_classes: int
    seed: int

    @property
    def dim(self) -> int:
        return self.x_train.shape[1]

    def batches(self, epoch: int, batch_size: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        order = np.random.default_rng([self.seed, 7919, epoch]).permutation(len(self.x_train))
        for start in range(0, len(order), batch_size):
            sel = order[start:start + batch_size]
            yield self.x_train[sel], self.y_train[sel]

    def iters_per_epoch(self, batch_size: int) -> int:
        return (len(self.x_train) + batch_size - 1) // batch_size


def _load_csv(spec: CsvDataSpec) -> tuple[np.ndarray, np.ndarray]:
    try:
        fh = open(spec.path, newline="")
    except OSError as exc:
        raise DataError(f"cannot open dataset {spec.path!r}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvParseError(f"{spec.path!r}: empty file") from None
        if spec.label_column not in header:
            raise CsvParseError(f"{spec.path!r}: label column {spec.label_column!r} not found")
        label_idx = header.index(spec.label_column)
        feature_idx = [i for i in range(len(header)) if i != label_idx]
        if not feature_idx:
            raise CsvParseError(f"{spec.path!r}: no feature columns")
        features, labels = [], []
        for row_no, row in enumerate(reader, start=1):
            if len(row) != len(header):
                raise CsvParseError(f"{spec.path!r}: row {row_no} has {len(row)} fields, expected {len(header)}")
            label = row[label_idx].strip()
            if not label:
                raise CsvParseError(f"{spec.path!r}: missing label value at row {row_no}")
            try:
                features.append([float(row[i]) for i in feature_idx])
            except ValueError as exc:
                raise CsvParseError(f"{spec.path!r}: non-numeric feature at row {row_no}") from exc
            labels.append(label)
    if not labels:
        raise CsvParseError(f"{spec.path!r}: no data rows")
    classes = sorted(set(labels))
    if len(classes) < 2:
        raise CsvParseError(f"{spec.path!r}: need at least 2 classes, got {len(classes)}")
    index = {label: i for i, label in enumerate(classes)}
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray([index[label] for label in labels], dtype=np.int64)
    return x, y


def make_dataset(spec: GaussianMixtureSpec | CsvDataSpec, seed: int) -> Dataset:
    """Materialize a dataset with a deterministic shuffle and train/eval split."""
    if isinstance(spec, GaussianMixtureSpec):
        rng = np.random.default_rng([seed, 11])
        means = rng.normal(size=(spec.classes, spec.dim))
        means *= spec.separation / np.linalg.norm(means, axis=1, keepdims=True)
        counts = np.full(spec.classes, spec.samples // spec.classes)
        counts[: spec.samples % spec.classes] += 1
        xs, ys = [], []
        for cls in range(spec.classes):
            xs.append(means[cls] + spec.spread * rng.normal(size=(counts[cls], spec.dim)))
            ys.append(np.full(counts[cls], cls, dtype=np.int64))
        x = np.concatenate(xs)
        y = np.concatenate(ys)
        n_classes = spec.classes
    else:
        rng = np.random.default_rng([seed, 11])
        x, y = _load_csv(spec)
        n_classes = int(y.max()) + 1
    order = rng.permutation(len(x))
    x, y = x[order], y[order]
    n_train = int(len(x) * spec.split)
    if n_train < 1 or n_train >= len(x):
        raise DataError(f"split {spec.split} leaves an empty train or eval set for {len(x)} samples")
    return Dataset(
        x_train=x[:n_train],
        y_train=y[:n_train],
        x_eval=x[n_train:],
        y_eval=y[n_train:],
        n_classes=n_classes,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# telemetry


@dataclass(frozen=True)
class TelemetryRow:
    epoch: int
    layer: str
    alpha_hill: float | None = None
    spectral_norm: float | None = None
    lr: float | None = None
    grad_l2: float | None = None
    train_loss: float | None = None
    eval_acc: float | None = None
    analysis_sec: float | None = None
    epoch_sec: float | None = None


@dataclass
class TrainTelemetry:
    """Per-epoch, per-layer training record; serializes to CSV."""

    rows: list[TelemetryRow] = field(default_factory=list)

    def epoch_rows(self) -> list[TelemetryRow]:
        return [r for r in self.rows if r.layer == "_epoch_"]

    def total_analysis_sec(self) -> float:
        return sum(r.analysis_sec or 0.0 for r in self.epoch_rows())

    def total_epoch_sec(self) -> float:
        return sum(r.epoch_sec or 0.0 for r in self.epoch_rows())

    def write_csv(self, fh: TextIO, timing: bool = True) -> None:
        """Write the telemetry table; timing=False zeroes the wall-clock fields.

        Wall times vary between runs, so reproducibility comparisons use
        timing=False to get byte-identical files.
        """

        def fmt(value) -> str:
            return "" if value is None else repr(value)

        fh.write(TELEMETRY_HEADER + "\n")
        for r in self.rows:
            a_sec = r.analysis_sec
            e_sec = r.epoch_sec
            if not timing:
                a_sec = 0.0 if a_sec is not None else None
                e_sec = 0.0 if e_sec is not None else None
            fields = [
                str(r.epoch),
                r.layer,
                fmt(r.alpha_hill),
                fmt(r.spectral_norm),
                fmt(r.lr),
                fmt(r.grad_l2),
                fmt(r.train_loss),
                fmt(r.eval_acc),
                fmt(a_sec),
                fmt(e_sec),
            ]
            fh.write(",".join(fields) + "\n")


# ---------------------------------------------------------------------------
# training loop


def _param_lr_map(
    decision: ScheduleDecision, params: dict[str, np.ndarray]
) -> dict[str, float]:
    lr_map = {}
    for name in params:
        layer = name.rsplit(".", 1)[0]
        if name.endswith(".w") and layer in decision.per_layer:
            lr_map[name] = decision.per_layer[layer]
        else:
            lr_map[name] = decision.eta_t
    return lr_map


def run_training(
    model: ModelSpec,
    data: GaussianMixtureSpec | CsvDataSpec,
    sched: ScheduleConfig,
    policy: LambdaMinPolicy,
    lambda_sr: float = 0.0,
    epochs: int | None = None,
    seed: int = 0,
    optim: OptimState | None = None,
    max_workers: int | None = None,
) -> tuple[TrainTelemetry, WeightSnapshot]:
    """Train for the given number of epochs, rescheduling at every window boundary.

    Returns the telemetry table and the final weight snapshot. Aborts with
    DivergenceError as soon as a batch loss is non-finite.
    """
    if epochs is None:
        epochs = sched.total_epochs
    if not 0 <= epochs <= sched.total_epochs:
        raise ConfigError(f"epochs must be in [0, total_epochs={sched.total_epochs}], got {epochs}")
    if lambda_sr < 0:
        raise ConfigError(f"lambda_sr must be nonnegative, got {lambda_sr}")
    dataset = make_dataset(data, seed)
    if dataset.dim != model.input_dim:
        raise ConfigError(f"dataset dim {dataset.dim} does not match model input {model.input_dim}")
    if dataset.n_classes != model.widths[-1]:
        raise ConfigError(
            f"dataset has {dataset.n_classes} classes but model outputs {model.widths[-1]}"
        )
    optim = optim if optim is not None else OptimState()
    params = init_params(model)
    layer_names = weight_layer_names(model)
    telemetry = TrainTelemetry()
    last_grad_norms: dict[str, float] | None = None

    # the schedule refreshes at least once per epoch: eta_t changes with t
    interval = min(sched.update_interval_iters, dataset.iters_per_epoch(optim.batch_size))

    for t in range(epochs):
        epoch_start = perf_counter()
        analysis_sec = 0.0
        decision = None
        batch_losses = []
        for it, (xb, yb) in enumerate(dataset.batches(t, optim.batch_size)):
            if it % interval == 0:
                a0 = perf_counter()
                snap = snapshot_params(params, model, epoch=t)
                decision = schedule_epoch(
                    sched, t, snap, policy, grad_norms=last_grad_norms, max_workers=max_workers
                )
                lr_map = _param_lr_map(decision, params)
                analysis_sec += perf_counter() - a0
            loss, grads = loss_and_grads(params, model, xb, yb)
            if not math.isfinite(loss):
                raise DivergenceError(t)
            batch_losses.append(loss)
            if lambda_sr > 0.0:
                for name in layer_names:
                    w = params[f"{name}.w"]
                    oriented = orient_array(w, name)
                    inc = snr_grad_term(oriented, lambda_sr)
                    grads[f"{name}.w"] = grads[f"{name}.w"] + inc.reshape(w.shape)
            last_grad_norms = {
                name: float(np.linalg.norm(grads[f"{name}.w"])) for name in layer_names
            }
            sgd_step(params, grads, optim, lr_map)
        eval_acc = accuracy(params, model, dataset.x_eval, dataset.y_eval)
        train_loss = float(np.mean(batch_losses))
        epoch_sec = perf_counter() - epoch_start
        for name in layer_names:
            metrics = decision.layer_metrics.get(name)
            telemetry.rows.append(
                TelemetryRow(
                    epoch=t,
                    layer=name,
                    alpha_hill=metrics.alpha_hill if metrics else None,
                    spectral_norm=metrics.spectral_norm if metrics else None,
                    lr=decision.per_layer[name],
                    grad_l2=last_grad_norms[name],
                )
            )
        telemetry.rows.append(
            TelemetryRow(
                epoch=t,
                layer="_epoch_",
                train_loss=train_loss,
                eval_acc=eval_acc,
                analysis_sec=analysis_sec,
                epoch_sec=epoch_sec,
            )
        )
    final = snapshot_params(params, model, epoch=epochs)
    return telemetry, final

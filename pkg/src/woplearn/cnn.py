"""From-scratch CNN pixel classifier: forward, backprop, Adam, training loop.

Fixed template: N conv-ReLU-maxpool blocks (same padding, stride 1, 2x2 max
pooling with floor on odd dims), one hidden fully connected layer with ReLU
and inverted dropout, a 2-unit output layer, softmax, cross-entropy loss.
Everything runs on numpy arrays in float32 (training default) or float64
(gradient checks); no autograd, gradients are derived by hand.

Feature maps are channels-last, (batch, height, width, channels): im2col
then moves contiguous memory, which is what training speed hinges on here.
Kernels keep the (out_ch, in_ch, k, k) layout used by the model container.

Class encoding: class 1 = keep the pixel, class 0 = remove it.  Argmax ties
break toward class 0.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .dataset import PatchDataset, shuffle_batches
from .errors import (
    InvalidArgumentError,
    ShapeError,
    StateError,
    TrainingDivergedError,
)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

_PREDICT_CHUNK = 8192


@dataclass(frozen=True)
class CnnConfig:
    """Architecture plus training hyperparameters for one model instance."""

    window_w: int
    window_h: int
    blocks: tuple[tuple[int, int], ...] = ((32, 5), (32, 5))
    fc_hidden: int = 512
    num_classes: int = 2
    dropout_rate: float = 0.0
    learning_rate: float = 1e-3
    batch_size: int = 50
    epochs: int = 50
    seed: int = 0
    precision: str = "f32"

    def __post_init__(self):
        object.__setattr__(
            self, "blocks", tuple((int(n), int(k)) for n, k in self.blocks)
        )
        if self.window_w < 1 or self.window_h < 1:
            raise InvalidArgumentError("window dimensions must be >= 1")
        if self.window_w % 2 == 0 or self.window_h % 2 == 0:
            raise InvalidArgumentError("window dimensions must be odd")
        if not self.blocks:
            raise InvalidArgumentError("at least one conv block is required")
        for n_masks, mask in self.blocks:
            if n_masks < 1:
                raise InvalidArgumentError("block mask count must be >= 1")
            if mask < 1 or mask % 2 == 0:
                raise InvalidArgumentError(f"mask size must be odd and >= 1, got {mask}")
        if self.fc_hidden < 1:
            raise InvalidArgumentError("fc_hidden must be >= 1")
        if self.num_classes != 2:
            raise InvalidArgumentError("only 2-class models are supported")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise InvalidArgumentError("dropout_rate must be in [0, 1)")
        if self.learning_rate <= 0:
            raise InvalidArgumentError("learning_rate must be positive")
        if self.batch_size < 1:
            raise InvalidArgumentError("batch_size must be >= 1")
        if self.epochs < 1:
            raise InvalidArgumentError("epochs must be >= 1")
        if self.precision not in ("f32", "f64"):
            raise InvalidArgumentError(f"precision must be f32 or f64, got {self.precision}")

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(np.float32 if self.precision == "f32" else np.float64)

    def spatial_chain(self) -> list[tuple[int, int]]:
        """(h, w) after each block; every entry must stay >= 1."""
        h, w = self.window_h, self.window_w
        chain = []
        for _ in self.blocks:
            h, w = h // 2, w // 2
            chain.append((h, w))
        return chain

    def flat_features(self) -> int:
        h, w = self.spatial_chain()[-1]
        return self.blocks[-1][0] * h * w


# ---------------------------------------------------------------------------
# Layer primitives (functional; each backward consumes its forward cache)
# ---------------------------------------------------------------------------


def _im2col(x_padded: np.ndarray, k: int) -> np.ndarray:
    """(B, Hp, Wp, C) -> (B, H, W, k*k*C) patch matrix for stride-1 convolution.

    Feature maps are channels-last throughout this module: window elements
    are then contiguous runs in memory, so this copy (the hot spot of every
    conv) streams instead of gathering.
    """
    view = np.lib.stride_tricks.sliding_window_view(x_padded, (k, k), axis=(1, 2))
    b, h, w, c = view.shape[:4]
    return np.ascontiguousarray(view.transpose(0, 1, 2, 4, 5, 3)).reshape(b, h, w, k * k * c)


def conv2d_forward(
    x: np.ndarray, kernels: np.ndarray, bias: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Same-padded stride-1 convolution.

    x: (B, H, W, C_in); kernels: (C_out, C_in, k, k); bias: (C_out,).
    out[b, y, x, o] = bias[o] + sum_{c,i,j} kernels[o,c,i,j] * x_pad[b, y+i, x+j, c].
    Returns (output (B, H, W, C_out), im2col cache for backward).
    """
    if x.ndim != 4 or kernels.ndim != 4 or x.shape[3] != kernels.shape[1]:
        raise ShapeError(f"conv2d shapes incompatible: input {x.shape}, kernels {kernels.shape}")
    c_out, c_in, k, _ = kernels.shape
    pad = k // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    cols = _im2col(xp, k)
    b, h, w, feat = cols.shape
    w_mat = kernels.transpose(2, 3, 1, 0).reshape(feat, c_out)
    out = cols.reshape(b * h * w, feat) @ w_mat
    out += bias
    return out.reshape(b, h, w, c_out), cols


def conv2d_backward(
    d_out: np.ndarray,
    cols: np.ndarray,
    kernels: np.ndarray,
    need_dx: bool = True,
) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    """Gradients of a same-padded stride-1 convolution: (d_x, d_kernels, d_bias).

    The input gradient is itself a same-padded correlation of d_out with the
    spatially flipped, channel-transposed kernels, so both directions reduce
    to im2col plus a matrix product.
    """
    b, h, w, c_out = d_out.shape
    _, c_in, k, _ = kernels.shape
    pad = k // 2
    d_flat = d_out.reshape(b * h * w, c_out)
    d_k = cols.reshape(b * h * w, -1).T @ d_flat
    d_kernels = np.ascontiguousarray(d_k.reshape(k, k, c_in, c_out).transpose(3, 2, 0, 1))
    d_bias = d_flat.sum(axis=0)
    if not need_dx:
        return None, d_kernels, d_bias
    m_flip = kernels[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(k * k * c_out, c_in)
    dp = np.pad(d_out, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    d_cols = _im2col(dp, k)
    d_x = d_cols.reshape(b * h * w, -1) @ m_flip
    return d_x.reshape(b, h, w, c_in), d_kernels, d_bias


def relu_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mask = x > 0
    return x * mask, mask


def relu_backward(d_out: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return d_out * mask


def maxpool2x2_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Non-overlapping 2x2 max pooling, odd trailing row/column dropped.

    x: (B, H, W, C).  Returns (pooled, argmax) where argmax holds the
    within-window row-major index of the maximum (first element wins ties),
    kept for the backward pass.
    """
    b, h, w, c = x.shape
    ph, pw = h // 2, w // 2
    windows = (
        x[:, : 2 * ph, : 2 * pw, :]
        .reshape(b, ph, 2, pw, 2, c)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(b, ph, pw, 4, c)
    )
    argmax = windows.argmax(axis=3)
    pooled = np.take_along_axis(windows, argmax[:, :, :, None, :], axis=3)[:, :, :, 0, :]
    return pooled, argmax


def maxpool2x2_backward(
    d_out: np.ndarray, argmax: np.ndarray, input_shape: tuple[int, ...]
) -> np.ndarray:
    b, h, w, c = input_shape
    ph, pw = h // 2, w // 2
    d_windows = np.zeros((b, ph, pw, 4, c), dtype=d_out.dtype)
    np.put_along_axis(d_windows, argmax[:, :, :, None, :], d_out[:, :, :, None, :], axis=3)
    d_x = np.zeros(input_shape, dtype=d_out.dtype)
    d_x[:, : 2 * ph, : 2 * pw, :] = (
        d_windows.reshape(b, ph, pw, 2, 2, c)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(b, 2 * ph, 2 * pw, c)
    )
    return d_x


def fc_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """x: (B, in) with weights (out, in) -> (B, out)."""
    if x.ndim != 2 or x.shape[1] != weights.shape[1]:
        raise ShapeError(f"fc shapes incompatible: input {x.shape}, weights {weights.shape}")
    return x @ weights.T + bias


def fc_backward(
    d_out: np.ndarray, x: np.ndarray, weights: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return d_out @ weights, d_out.T @ x, d_out.sum(axis=0)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max-subtraction stabilization."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean negative log-probability of the true class, clamped at 1e-12."""
    p = probs[np.arange(len(labels)), labels]
    return float(-np.log(np.maximum(p, 1e-12)).mean())


def dropout_forward(
    x: np.ndarray,
    rate: float,
    training: bool,
    rng: np.random.Generator | None = None,
    mask: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Inverted dropout: zero units with probability `rate`, scale survivors
    by 1/(1-rate) so inference is the identity.  A fixed mask may be injected
    (gradient checks); otherwise the mask is drawn from rng."""
    if not 0.0 <= rate < 1.0:
        raise InvalidArgumentError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x, None
    if mask is None:
        if rng is None:
            raise InvalidArgumentError("training dropout requires an rng or a mask")
        mask = rng.random(x.shape) >= rate
    return x * mask / (1.0 - rate), mask


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


class CnnModel:
    """Parameter set for the fixed conv-pool / FC template, plus Adam state."""

    def __init__(self, config: CnnConfig):
        if min(config.spatial_chain()[-1]) < 1:
            raise InvalidArgumentError(
                f"window {config.window_w}x{config.window_h} collapses to zero "
                f"spatial extent after {len(config.blocks)} pooling stages"
            )
        self.config = config
        self.params: dict[str, np.ndarray] = {}
        self.param_order: list[str] = []
        rng = np.random.Generator(np.random.PCG64(config.seed))
        in_ch = 1
        for i, (n_masks, mask) in enumerate(config.blocks):
            self._add_param(f"conv{i}.w", self._he_init(rng, (n_masks, in_ch, mask, mask)))
            self._add_param(f"conv{i}.b", np.zeros(n_masks, dtype=config.dtype))
            in_ch = n_masks
        flat = config.flat_features()
        self._add_param("fc1.w", self._he_init(rng, (config.fc_hidden, flat)))
        self._add_param("fc1.b", np.zeros(config.fc_hidden, dtype=config.dtype))
        self._add_param("fc2.w", self._he_init(rng, (config.num_classes, config.fc_hidden)))
        self._add_param("fc2.b", np.zeros(config.num_classes, dtype=config.dtype))
        self.adam_m = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.adam_v = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.adam_t = 0
        self.is_trained = False
        self.epoch = 0

    def _add_param(self, name: str, value: np.ndarray) -> None:
        self.params[name] = value
        self.param_order.append(name)

    def _he_init(self, rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
        fan_in = int(np.prod(shape[1:]))
        std = np.sqrt(2.0 / fan_in)
        return (rng.standard_normal(shape) * std).astype(self.config.dtype)

    @property
    def dtype(self) -> np.dtype:
        return self.config.dtype

    def clone_state(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}

    def predict(self, patches: np.ndarray) -> np.ndarray:
        return predict(self, patches)


def forward(
    model: CnnModel,
    x: np.ndarray,
    training: bool = False,
    rng: np.random.Generator | None = None,
    drop_mask: np.ndarray | None = None,
) -> tuple[np.ndarray, dict]:
    """Run the full stack; returns (class probabilities, backward cache).

    x is channels-last: (b, window_h, window_w, 1).
    """
    cfg = model.config
    if x.ndim != 4 or x.shape[3] != 1 or x.shape[1:3] != (cfg.window_h, cfg.window_w):
        raise ShapeError(
            f"input must have shape (b, {cfg.window_h}, {cfg.window_w}, 1), got {x.shape}"
        )
    x = np.ascontiguousarray(x, dtype=cfg.dtype)
    cache: dict = {"blocks": []}
    h = x
    for i in range(len(cfg.blocks)):
        kernels = model.params[f"conv{i}.w"]
        conv_out, cols = conv2d_forward(h, kernels, model.params[f"conv{i}.b"])
        act, relu_mask = relu_forward(conv_out)
        pooled, argmax = maxpool2x2_forward(act)
        cache["blocks"].append(
            {
                "cols": cols,
                "relu_mask": relu_mask,
                "act_shape": act.shape,
                "argmax": argmax,
            }
        )
        h = pooled
    cache["flat_in_shape"] = h.shape
    flat = h.reshape(h.shape[0], -1)
    cache["flat"] = flat
    hidden_pre = fc_forward(flat, model.params["fc1.w"], model.params["fc1.b"])
    hidden, fc1_mask = relu_forward(hidden_pre)
    dropped, drop_mask = dropout_forward(
        hidden, cfg.dropout_rate, training, rng=rng, mask=drop_mask
    )
    cache["fc1_mask"] = fc1_mask
    cache["hidden"] = hidden
    cache["dropped"] = dropped
    cache["drop_mask"] = drop_mask
    logits = fc_forward(dropped, model.params["fc2.w"], model.params["fc2.b"])
    probs = softmax(logits)
    cache["probs"] = probs
    return probs, cache


def backward(model: CnnModel, cache: dict | None, labels: np.ndarray) -> dict[str, np.ndarray]:
    """Gradient of mean cross-entropy w.r.t. every parameter.

    Uses the cached forward state; the softmax+cross-entropy gradient at the
    logits is (probs - onehot) / batch_size.
    """
    if cache is None:
        raise StateError("backward called before forward (no cache)")
    cfg = model.config
    probs = cache["probs"]
    b = len(labels)
    d_logits = probs.copy()
    d_logits[np.arange(b), labels] -= 1.0
    d_logits /= b

    grads: dict[str, np.ndarray] = {}
    d_dropped, grads["fc2.w"], grads["fc2.b"] = fc_backward(
        d_logits, cache["dropped"], model.params["fc2.w"]
    )
    if cache["drop_mask"] is not None:
        d_hidden = d_dropped * cache["drop_mask"] / (1.0 - cfg.dropout_rate)
    else:
        d_hidden = d_dropped
    d_hidden_pre = relu_backward(d_hidden, cache["fc1_mask"])
    d_flat, grads["fc1.w"], grads["fc1.b"] = fc_backward(
        d_hidden_pre, cache["flat"], model.params["fc1.w"]
    )
    d = d_flat.reshape(cache["flat_in_shape"])
    for i in reversed(range(len(cfg.blocks))):
        blk = cache["blocks"][i]
        d_act = maxpool2x2_backward(d, blk["argmax"], blk["act_shape"])
        d_conv = relu_backward(d_act, blk["relu_mask"])
        d, grads[f"conv{i}.w"], grads[f"conv{i}.b"] = conv2d_backward(
            d_conv, blk["cols"], model.params[f"conv{i}.w"], need_dx=(i > 0)
        )
    return grads


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    where: str = "",
) -> None:
    """One Adam update in place (beta1=0.9, beta2=0.999, eps=1e-8)."""
    for name in params:
        if not np.isfinite(grads[name]).all():
            raise TrainingDivergedError(f"non-finite gradient in {name} {where}".strip())
    state.t += 1
    c1 = 1.0 - ADAM_BETA1 ** state.t
    c2 = 1.0 - ADAM_BETA2 ** state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_mae: float
    seconds: float


def batch_to_input(patches: np.ndarray, config: CnnConfig) -> np.ndarray:
    """Flattened row-major patches -> channels-last (b, h, w, 1) input batch."""
    return patches.reshape(-1, config.window_h, config.window_w, 1).astype(config.dtype)


def train(
    model: CnnModel,
    train_ds: PatchDataset,
    val_ds: PatchDataset,
    checkpoint_sink: Callable[[int, "CnnModel"], None] | None = None,
    log: Callable[[str], None] | None = None,
) -> list[EpochRecord]:
    """Mini-batch Adam training with a per-epoch checkpoint and validation MAE.

    Deterministic for a fixed config seed: batch order derives from
    (seed XOR epoch) and the dropout stream from the seed alone, so training
    for fewer epochs reproduces the corresponding checkpoint prefix exactly.
    """
    cfg = model.config
    for name, ds in (("train", train_ds), ("validation", val_ds)):
        if ds.patch_bits != cfg.window_w * cfg.window_h:
            raise InvalidArgumentError(
                f"{name} dataset patch size {ds.patch_bits} does not match "
                f"model window {cfg.window_w}x{cfg.window_h}"
            )
    if len(train_ds) == 0:
        raise InvalidArgumentError("training dataset is empty")
    drop_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, 0xD0])))
    adam = AdamState(m=model.adam_m, v=model.adam_v, t=model.adam_t)
    model.is_trained = True
    records: list[EpochRecord] = []
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        loss_sum = 0.0
        n_batches = 0
        for step, (patches, labels) in enumerate(
            shuffle_batches(train_ds, cfg.batch_size, cfg.seed, epoch)
        ):
            x = batch_to_input(patches, cfg)
            probs, cache = forward(model, x, training=True, rng=drop_rng)
            loss = cross_entropy(probs, labels.astype(np.int64))
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch} step {step}", epoch=epoch, step=step
                )
            grads = backward(model, cache, labels.astype(np.int64))
            try:
                adam_step(model.params, grads, adam, cfg.learning_rate,
                          where=f"at epoch {epoch} step {step}")
            except TrainingDivergedError as exc:
                exc.epoch, exc.step = epoch, step
                raise
            loss_sum += loss
            n_batches += 1
        model.adam_t = adam.t
        model.epoch = epoch
        val_mae = _dataset_mae(model, val_ds)
        rec = EpochRecord(
            epoch=epoch,
            train_loss=loss_sum / max(n_batches, 1),
            val_mae=val_mae,
            seconds=time.perf_counter() - t0,
        )
        records.append(rec)
        if checkpoint_sink is not None:
            checkpoint_sink(epoch, model)
        if log is not None:
            log(
                f"epoch {epoch}/{cfg.epochs}: loss {rec.train_loss:.4f} "
                f"val_mae {rec.val_mae:.4f} ({rec.seconds:.1f}s)"
            )
    return records


def _dataset_mae(model: CnnModel, ds: PatchDataset) -> float:
    if len(ds) == 0:
        raise InvalidArgumentError("validation dataset is empty")
    wrong = 0
    for start in range(0, len(ds), _PREDICT_CHUNK):
        idx = slice(start, min(start + _PREDICT_CHUNK, len(ds)))
        pred = _predict_batch(model, ds.patches(idx))
        wrong += int((pred != ds.labels[idx]).sum())
    return wrong / len(ds)


def _predict_batch(model: CnnModel, patches: np.ndarray) -> np.ndarray:
    x = batch_to_input(patches, model.config)
    probs, _ = forward(model, x, training=False)
    return probs.argmax(axis=1).astype(np.uint8)


def predict(model: CnnModel, patches: np.ndarray) -> np.ndarray:
    """Classify flattened patches with the trained model (dropout disabled)."""
    if not model.is_trained:
        raise StateError("model has not been trained")
    patches = np.asarray(patches, dtype=np.uint8)
    expected = model.config.window_w * model.config.window_h
    if patches.ndim != 2 or patches.shape[1] != expected:
        raise InvalidArgumentError(
            f"patches must have shape (n, {expected}), got {patches.shape}"
        )
    out = np.empty(len(patches), dtype=np.uint8)
    for start in range(0, len(patches), _PREDICT_CHUNK):
        sl = slice(start, start + _PREDICT_CHUNK)
        out[sl] = _predict_batch(model, patches[sl])
    return out

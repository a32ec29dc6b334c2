"""Training stack: masked MSE + L2 loss, Adam, gradient clipping, a
multi-step learning-rate schedule, train/validation splitting, and the
training loop with best-validation-epoch parameter selection."""

from __future__ import annotations

import math
from bisect import bisect_right
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .fusion import Sample
from .net import ModelConfig, PyramidRegressor

__all__ = [
    "EpochRecord",
    "OptimizerState",
    "TrainConfig",
    "TrainResult",
    "TrainingDiverged",
    "adam_step",
    "clip_gradients",
    "evaluate_loss",
    "loss",
    "loss_and_grad",
    "lr_at",
    "split_train_val",
    "train_loop",
    "write_trace_csv",
]


class TrainingDiverged(RuntimeError):
    """The loop hit a non-finite loss or parameter values."""


# ------------------------------------------------------------- configuration


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for the optimizer, schedule, and loop."""

    batch_size: int = 5
    lr: float = 1e-4
    milestones: tuple = (400000, 700000)
    lr_gamma: float = 0.1
    epochs: int = 200
    iters_per_epoch: int = 5000
    grad_clip: float = 1000.0
    l2_lambda: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    val_fraction: float = 0.10
    seed: int = 0

    def __post_init__(self):
        if int(self.batch_size) < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr > 0.0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not self.lr_gamma > 0.0:
            raise ValueError(f"lr_gamma must be positive, got {self.lr_gamma}")
        if int(self.epochs) < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if int(self.iters_per_epoch) < 1:
            raise ValueError(
                f"iters_per_epoch must be >= 1, got {self.iters_per_epoch}"
            )
        if not self.grad_clip > 0.0:
            raise ValueError(f"grad_clip must be positive, got {self.grad_clip}")
        if self.l2_lambda < 0.0:
            raise ValueError(f"l2_lambda must be >= 0, got {self.l2_lambda}")
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not (0.0 <= b < 1.0):
                raise ValueError(f"{name} must be in [0, 1), got {b}")
        if not self.epsilon > 0.0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if not (0.0 < self.val_fraction < 1.0):
            raise ValueError(
                f"val_fraction must be in (0, 1), got {self.val_fraction}"
            )
        ms = tuple(int(m) for m in self.milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError(f"milestones must be strictly increasing, got {ms}")
        object.__setattr__(self, "milestones", ms)


# ---------------------------------------------------------------------- loss


def _l2_penalty(weights: Iterable[np.ndarray], l2_lambda: float) -> float:
    arrays = [np.asarray(w) for w in weights]
    total = sum(a.size for a in arrays)
    if l2_lambda == 0.0 or total == 0:
        return 0.0
    sq = sum(float((a.astype(np.float64) ** 2).sum()) for a in arrays)
    return l2_lambda * sq / total


def loss(pred, labels, mask, weights: Iterable[np.ndarray] = (), l2_lambda: float = 0.0):
    """Mean squared error over masked pixels plus a mean-square weight
    penalty. Unmasked pixels never enter the computation."""
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != labels.shape or pred.shape != mask.shape:
        raise ValueError(
            f"shape mismatch: pred {pred.shape}, labels {labels.shape}, "
            f"mask {mask.shape}"
        )
    n = int(mask.sum())
    if n == 0:
        raise ValueError("mask has no labeled pixels")
    diff = pred[mask].astype(np.float64) - labels[mask].astype(np.float64)
    return float((diff * diff).mean()) + _l2_penalty(weights, l2_lambda)


def loss_and_grad(pred, labels, mask):
    """Masked MSE and its gradient with respect to the prediction. The
    gradient is exactly zero at unmasked pixels."""
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    mask = np.asarray(mask, dtype=bool)
    value = loss(pred, labels, mask)
    n = int(mask.sum())
    grad = np.zeros_like(pred, dtype=np.float64)
    grad[mask] = 2.0 * (pred[mask] - labels[mask]) / n
    return value, grad


# ---------------------------------------------------------------------- adam


@dataclass
class OptimizerState:
    """Per-parameter first/second moment estimates and the step counter."""

    m: list
    v: list
    t: int = 0

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray]) -> "OptimizerState":
        return cls(
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            t=0,
        )


def adam_step(params, grads, state: OptimizerState, lr_t: float, config: TrainConfig):
    """One in-place Adam update: moment accumulation, bias correction with
    the incremented step counter, then the corrected step. The stabilizer is
    added after the square root."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads, and optimizer state must align")
    for g in grads:
        if not np.isfinite(g).all():
            raise ValueError("gradients must be finite")
    b1, b2, eps = config.beta1, config.beta2, config.epsilon
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr_t * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


def clip_gradients(grads, max_abs: float = 1000.0):
    """Clamp every gradient element to [-max_abs, +max_abs], in place."""
    for g in grads:
        np.clip(g, -max_abs, max_abs, out=g)
    return grads


def lr_at(iteration: int, config: TrainConfig) -> float:
    """Stepped learning rate: the base rate decayed once per milestone that
    the iteration counter has reached."""
    if iteration < 0:
        raise ValueError(f"iteration must be >= 0, got {iteration}")
    k = bisect_right(config.milestones, iteration)
    return config.lr * config.lr_gamma ** k


# --------------------------------------------------------------------- split


def split_train_val(samples, val_fraction: float = 0.10, seed: int = 0):
    """Deterministic shuffled partition; the validation size is the
    half-up rounding of ``val_fraction * n``."""
    samples = list(samples)
    n = len(samples)
    if n < 2:
        raise ValueError(f"need at least 2 samples to split, got {n}")
    if not (0.0 < val_fraction < 1.0):
        raise ValueError(f"val_fraction must be in (0, 1), got {val_fraction}")
    n_val = int(math.floor(val_fraction * n + 0.5))
    order = np.random.default_rng(seed).permutation(n)
    val = [samples[i] for i in order[:n_val]]
    train = [samples[i] for i in order[n_val:]]
    return train, val


# ---------------------------------------------------------------- train loop


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float


@dataclass
class TrainResult:
    model: PyramidRegressor
    trace: list
    best_epoch: int
    best_val_loss: float


def trace_csv_text(trace: Sequence[EpochRecord]) -> str:
    lines = ["epoch,train_loss,val_loss"]
    for r in trace:
        lines.append(
            f"{int(r.epoch)},{repr(float(r.train_loss))},{repr(float(r.val_loss))}"
        )
    return "\n".join(lines) + "\n"


def write_trace_csv(path: str, trace: Sequence[EpochRecord]) -> None:
    from .geo import atomic_write_bytes

    atomic_write_bytes(path, trace_csv_text(trace).encode("utf-8"))


def _stack(samples: Sequence[Sample], dtype):
    x = np.stack([s.patch for s in samples]).astype(dtype, copy=False)
    y = np.stack([s.label_values for s in samples]).astype(dtype, copy=False)
    m = np.stack([s.label_mask for s in samples])
    counts = m.reshape(m.shape[0], -1).sum(axis=1).astype(np.float64)
    return x, y, m, counts


def _first_nonfinite(model: PyramidRegressor):
    for name, arr in model.params():
        if not np.isfinite(arr).all():
            return name
    for name, arr in model.grads():
        if not np.isfinite(arr).all():
            return f"gradient of {name}"
    return None


def _batched_data_loss(model, x, y, m, counts, chunk=64):
    """Mean over samples of per-sample masked MSE, without touching grads."""
    total = 0.0
    for lo in range(0, x.shape[0], chunk):
        pred, _, _ = model.forward(x[lo:lo + chunk])
        diff = np.where(m[lo:lo + chunk], pred - y[lo:lo + chunk], 0.0)
        se = (diff.astype(np.float64) ** 2).reshape(diff.shape[0], -1).sum(axis=1)
        total += float((se / counts[lo:lo + chunk]).sum())
    return total / x.shape[0]


def evaluate_loss(model: PyramidRegressor, samples: Sequence[Sample],
                  config: TrainConfig) -> float:
    """Loss of a model over a sample set: mean per-sample masked MSE plus
    the configured weight penalty."""
    if not samples:
        raise ValueError("cannot evaluate on an empty sample set")
    x, y, m, counts = _stack(samples, model.dtype)
    data = _batched_data_loss(model, x, y, m, counts)
    return data + _l2_penalty([a for _, a in model.params()], config.l2_lambda)


def train_loop(samples, config: TrainConfig, model: PyramidRegressor | None = None,
               model_config: ModelConfig | None = None) -> TrainResult:
    """Minibatch training with replacement sampling. Tracks per-epoch train
    and validation loss and returns the parameters from the epoch with the
    lowest validation loss."""
    samples = list(samples)
    if not samples:
        raise ValueError("no samples to train on")
    shape = samples[0].patch.shape
    for s in samples:
        if s.patch.shape != shape:
            raise ValueError(
                f"sample patches disagree in shape: {s.patch.shape} vs {shape}"
            )
    train_s, val_s = split_train_val(samples, config.val_fraction, config.seed)
    if not train_s:
        raise ValueError("training split is empty; reduce val_fraction")
    if not val_s:
        raise ValueError(
            "validation split is empty; increase val_fraction or sample count"
        )
    if model is None:
        model = PyramidRegressor(shape[0], model_config or ModelConfig(seed=config.seed))
    if model.in_channels != shape[0]:
        raise ValueError(
            f"model expects {model.in_channels} input channels, "
            f"samples have {shape[0]}"
        )

    x, y, m, counts = _stack(train_s, model.dtype)
    n_train = x.shape[0]
    params = [a for _, a in model.params()]
    total_w = sum(p.size for p in params)
    state = OptimizerState.for_params(params)
    rng = np.random.default_rng((config.seed, 1))

    trace: list[EpochRecord] = []
    best_val = math.inf
    best_epoch = 0
    best_snap = None
    global_iter = 0

    for epoch in range(1, config.epochs + 1):
        epoch_sum = 0.0
        for _ in range(config.iters_per_epoch):
            iteration = global_iter + 1
            idx = rng.integers(0, n_train, size=config.batch_size)
            xb, yb, mb, nb = x[idx], y[idx], m[idx], counts[idx]
            try:
                pred, _, _ = model.forward(xb)
            except FloatingPointError as exc:
                bad = _first_nonfinite(model) or "the forward pass"
                raise TrainingDiverged(
                    f"training diverged at iteration {iteration}: "
                    f"non-finite values in {bad}"
                ) from exc
            diff = np.where(mb, pred - yb, 0.0)
            se = (diff.astype(np.float64) ** 2).reshape(diff.shape[0], -1).sum(axis=1)
            data = float((se / nb).mean())
            value = data + _l2_penalty(params, config.l2_lambda)
            if not math.isfinite(value):
                bad = _first_nonfinite(model) or "the loss"
                raise TrainingDiverged(
                    f"training diverged at iteration {iteration}: "
                    f"non-finite values in {bad}"
                )
            scale = (2.0 / (nb * diff.shape[0]))[:, None, None]
            dpred = (diff * scale).astype(model.dtype, copy=False)
            model.zero_grads()
            model.backward(dpred)
            grads = [g for _, g in model.grads()]
            if config.l2_lambda > 0.0:
                factor = 2.0 * config.l2_lambda / total_w
                for p, g in zip(params, grads):
                    g += (factor * p).astype(g.dtype, copy=False)
            clip_gradients(grads, config.grad_clip)
            adam_step(params, grads, state, lr_at(global_iter, config), config)
            global_iter = iteration
            epoch_sum += value

        val_loss = evaluate_loss(model, val_s, config)
        trace.append(
            EpochRecord(
                epoch=epoch,
                train_loss=epoch_sum / config.iters_per_epoch,
                val_loss=val_loss,
            )
        )
        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_snap = model.snapshot_params()

    if best_snap is not None:
        model.load_param_snapshot(best_snap)
    return TrainResult(
        model=model, trace=trace, best_epoch=best_epoch, best_val_loss=best_val
    )

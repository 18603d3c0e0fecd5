"""Training loop, metrics, optimizer, normalization, gradient checking.

The loss is the mean over a batch of per-sample relative L2 errors, the
metric the paper community compares on. Optimization is textbook Adam with
bias correction and a step-halving schedule. Everything is float64 and
seeded: equal seeds give bitwise-equal parameter trajectories at a fixed
thread count.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import (
    EmptyBatch,
    NonFiniteLoss,
    ShapeMismatch,
    ZeroTarget,
    ZeroVarianceWarning,
)
from .operator import NormModel, _backward_batch, _forward_batch

__all__ = [
    "rel_l2",
    "rel_l2_batch",
    "mme_batch",
    "AdamState",
    "adam_step",
    "Normalizer",
    "fit_normalizer",
    "TrainConfig",
    "Metrics",
    "train",
    "evaluate",
    "predict",
    "gradcheck",
]


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def rel_l2(pred: np.ndarray, target: np.ndarray) -> float:
    """Relative L2 error ||pred - target|| / ||target|| over all entries."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs target {target.shape}")
    denom = np.linalg.norm(target)
    if denom == 0.0:
        raise ZeroTarget("relative error undefined for a zero target")
    return float(np.linalg.norm(pred - target) / denom)


def rel_l2_batch(preds: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Per-sample relative L2 errors for stacked fields (N, n_x, d_c)."""
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.shape != targets.shape:
        raise ShapeMismatch(f"preds {preds.shape} vs targets {targets.shape}")
    if preds.shape[0] == 0:
        raise EmptyBatch("no samples")
    num = np.sqrt(((preds - targets) ** 2).sum(axis=(1, 2)))
    den = np.sqrt((targets ** 2).sum(axis=(1, 2)))
    if np.any(den == 0.0):
        idx = int(np.argmin(den))
        raise ZeroTarget(f"target {idx} is identically zero")
    return num / den


def mme_batch(preds: np.ndarray, targets: np.ndarray) -> float:
    """Mean over samples of the maximum absolute nodal error."""
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.shape != targets.shape:
        raise ShapeMismatch(f"preds {preds.shape} vs targets {targets.shape}")
    if preds.shape[0] == 0:
        raise EmptyBatch("no samples")
    return float(np.abs(preds - targets).max(axis=(1, 2)).mean())


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """First/second moment accumulators plus the step counter."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: dict,
    grads: dict,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """One Adam update, in place, with bias correction.

    ``params`` and ``grads`` map names to arrays of matching shapes; the
    state is created lazily on first use and returned.
    """
    if set(params) != set(grads):
        raise ShapeMismatch("parameter and gradient name sets differ")
    state.t += 1
    t = state.t
    for name in params:
        p, g = params[name], grads[name]
        if p.shape != g.shape:
            raise ShapeMismatch(f"{name}: param {p.shape} vs grad {g.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        mhat = m / (1.0 - beta1 ** t)
        vhat = v / (1.0 - beta2 ** t)
        p -= lr * mhat / (np.sqrt(vhat) + eps)
    return state


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

@dataclass
class Normalizer:
    """Global per-channel affine normalization, fit on the training split."""

    mode: str = "global_per_channel"
    in_mean: Optional[np.ndarray] = None
    in_scale: Optional[np.ndarray] = None
    out_mean: Optional[np.ndarray] = None
    out_scale: Optional[np.ndarray] = None

    def apply_input(self, x: np.ndarray) -> np.ndarray:
        if self.mode == "none":
            return x
        return (x - self.in_mean) / self.in_scale

    def apply_output(self, y: np.ndarray) -> np.ndarray:
        if self.mode == "none":
            return y
        return (y - self.out_mean) / self.out_scale

    def invert_output(self, y: np.ndarray) -> np.ndarray:
        if self.mode == "none":
            return y
        return y * self.out_scale + self.out_mean

    def to_dict(self) -> dict:
        if self.mode == "none":
            return {"mode": "none"}
        return {
            "mode": self.mode,
            "in_mean": self.in_mean.tolist(),
            "in_scale": self.in_scale.tolist(),
            "out_mean": self.out_mean.tolist(),
            "out_scale": self.out_scale.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Normalizer":
        if doc["mode"] == "none":
            return cls(mode="none")
        return cls(
            mode=doc["mode"],
            in_mean=np.asarray(doc["in_mean"]),
            in_scale=np.asarray(doc["in_scale"]),
            out_mean=np.asarray(doc["out_mean"]),
            out_scale=np.asarray(doc["out_scale"]),
        )


def _channel_stats(arr: np.ndarray):
    flat = arr.reshape(-1, arr.shape[-1])
    mean = flat.mean(axis=0)
    scale = flat.std(axis=0)
    quiet = scale < 1e-12
    if quiet.any():
        warnings.warn(
            f"channel(s) {np.nonzero(quiet)[0].tolist()} have (near) zero "
            "variance; passing through unscaled",
            ZeroVarianceWarning,
            stacklevel=3,
        )
        scale = np.where(quiet, 1.0, scale)
    return mean, scale


def fit_normalizer(inputs: np.ndarray, outputs: np.ndarray,
                   mode: Optional[str] = "global_per_channel") -> Normalizer:
    """Fit per-channel statistics on training arrays (N, n_x, d_c)."""
    if mode is None or mode == "none":
        return Normalizer(mode="none")
    if mode != "global_per_channel":
        raise ValueError(f"unknown normalization mode {mode!r}")
    in_mean, in_scale = _channel_stats(np.asarray(inputs, dtype=np.float64))
    out_mean, out_scale = _channel_stats(np.asarray(outputs, dtype=np.float64))
    return Normalizer(
        mode=mode,
        in_mean=in_mean, in_scale=in_scale,
        out_mean=out_mean, out_scale=out_scale,
    )


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 20
    lr: float = 1e-3
    lr_halve_every: int = 100
    seed: int = 0
    weight_decay: float = 0.0
    normalization: Optional[str] = "global_per_channel"
    eval_every: int = 1


@dataclass
class Metrics:
    """Aggregate and per-sample evaluation results (original units)."""

    rel_l2: float
    mme: float
    per_sample_rel_l2: np.ndarray
    per_sample_max_err: np.ndarray


def _split_indices(dataset):
    tr = np.asarray(dataset.split["train"], dtype=np.int64)
    te = np.asarray(dataset.split["test"], dtype=np.int64)
    return tr, te


def train(model: NormModel, dataset, cfg: TrainConfig,
          callback=None) -> dict:
    """Train in place; returns the history record.

    The normalizer is fit on the training split, stored on the model, and
    training runs in normalized space. The recorded test metric is the real
    one: predictions are de-normalized before comparison. History holds one
    entry per epoch: mean training loss, test rel_l2, and wall seconds.
    When ``cfg.eval_every`` is larger than one, the test metric is computed
    only every that-many epochs (and always on the last); skipped epochs
    record None. Evaluation never feeds back into the optimization, so the
    trained parameters do not depend on this setting.

    ``callback``, if given, is invoked after every epoch with
    ``(epoch, train_loss, test_rel_l2, seconds)``; it has no effect on the
    computation.

    Raises
    ------
    NonFiniteLoss
        If any per-sample loss stops being finite; the exception names the
        offending dataset index.
    """
    tr_idx, te_idx = _split_indices(dataset)
    if tr_idx.size == 0:
        raise EmptyBatch("training split is empty")
    inputs = np.asarray(dataset.inputs, dtype=np.float64)
    outputs = np.asarray(dataset.outputs, dtype=np.float64)
    normalizer = fit_normalizer(inputs[tr_idx], outputs[tr_idx],
                                cfg.normalization)
    model.normalizer = normalizer
    x = normalizer.apply_input(inputs)
    y = normalizer.apply_output(outputs)

    params = dict(model.parameters())
    state = AdamState()
    rng = np.random.default_rng(cfg.seed)
    history = {"train_loss": [], "test_rel_l2": [], "epoch_seconds": []}
    n_train = tr_idx.size
    batch = max(1, min(cfg.batch_size, n_train))

    for epoch in range(cfg.epochs):
        tic = time.perf_counter()
        lr = cfg.lr * 0.5 ** (epoch // cfg.lr_halve_every)
        order = tr_idx[rng.permutation(n_train)]
        loss_sum = 0.0
        for s in range(0, n_train, batch):
            ids = order[s:s + batch]
            xb, yb = x[ids], y[ids]
            pred, cache = _forward_batch(model, xb, keep=True)
            diff = pred - yb
            err = np.sqrt((diff ** 2).sum(axis=(1, 2)))
            den = np.sqrt((yb ** 2).sum(axis=(1, 2)))
            if np.any(den == 0.0):
                raise ZeroTarget(
                    f"training target {ids[int(np.argmin(den))]} is zero"
                )
            rels = err / den
            if not np.all(np.isfinite(rels)):
                bad = int(ids[int(np.argmin(np.isfinite(rels)))])
                raise NonFiniteLoss(
                    f"non-finite loss at epoch {epoch}, sample {bad}",
                    sample_index=bad,
                )
            loss_sum += float(rels.sum())
            # d(mean rel)/d pred = diff / (B * ||diff|| * ||target||)
            safe = np.where(err == 0.0, 1.0, err)
            scale = 1.0 / (len(ids) * safe * den)
            dU = diff * scale[:, None, None]
            grads, _ = _backward_batch(model, cache, dU)
            if cfg.weight_decay:
                for name, p in params.items():
                    grads[name] += cfg.weight_decay * p
            adam_step(params, grads, state, lr)
        history["train_loss"].append(loss_sum / n_train)
        eval_now = (epoch + 1) % max(1, cfg.eval_every) == 0 \
            or epoch == cfg.epochs - 1
        if te_idx.size and eval_now:
            m = evaluate(model, dataset, split="test")
            history["test_rel_l2"].append(m.rel_l2)
        elif te_idx.size:
            history["test_rel_l2"].append(None)
        else:
            history["test_rel_l2"].append(float("nan"))
        history["epoch_seconds"].append(time.perf_counter() - tic)
        if callback is not None:
            callback(epoch, history["train_loss"][-1],
                     history["test_rel_l2"][-1],
                     history["epoch_seconds"][-1])
    return history


def predict(model: NormModel, inputs: np.ndarray,
            batch_size: int = 100) -> np.ndarray:
    """Model predictions in original units for stacked inputs (N, n, d_a)."""
    inputs = np.asarray(inputs, dtype=np.float64)
    normalizer = model.normalizer or Normalizer(mode="none")
    out = []
    for s in range(0, inputs.shape[0], batch_size):
        xb = normalizer.apply_input(inputs[s:s + batch_size])
        pred, _ = _forward_batch(model, xb, keep=False)
        out.append(normalizer.invert_output(pred))
    return np.concatenate(out, axis=0)


def evaluate(model: NormModel, dataset, split: str = "test") -> Metrics:
    """Metrics over one dataset split, in original units."""
    idx = np.asarray(dataset.split[split], dtype=np.int64)
    if idx.size == 0:
        raise EmptyBatch(f"split {split!r} is empty")
    inputs = np.asarray(dataset.inputs, dtype=np.float64)[idx]
    targets = np.asarray(dataset.outputs, dtype=np.float64)[idx]
    preds = predict(model, inputs)
    rels = rel_l2_batch(preds, targets)
    maxes = np.abs(preds - targets).max(axis=(1, 2))
    return Metrics(
        rel_l2=float(rels.mean()),
        mme=float(maxes.mean()),
        per_sample_rel_l2=rels,
        per_sample_max_err=maxes,
    )


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def gradcheck(model: NormModel, a, n_params: int = 30, step: float = 1e-6,
              seed: int = 0) -> float:
    """Compare reverse-mode gradients against central differences.

    A fixed random output cotangent G defines the scalar s = <forward(a), G>.
    ``n_params`` coordinates are sampled without replacement across the whole
    parameter vector; for each, s is re-evaluated at +-step and the central
    difference is compared to the reverse-mode gradient. Returns the worst
    relative discrepancy.
    """
    from .operator import backward, forward  # local: gradcheck is diagnostic
    from .spectral import Field

    if not isinstance(a, Field):
        a = Field(np.asarray(a, dtype=np.float64))
    rng = np.random.default_rng(seed)
    out0 = forward(model, a).values
    G = rng.standard_normal(out0.shape)
    grads, _ = backward(model, a, G)

    params = model.parameters()
    sizes = np.array([arr.size for _, arr in params])
    total = int(sizes.sum())
    chosen = rng.choice(total, size=min(n_params, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    worst = 0.0
    for flat in np.sort(chosen):
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        name, arr = params[k]
        local = int(flat - offsets[k])
        idx = np.unravel_index(local, arr.shape)
        keep = arr[idx]
        arr[idx] = keep + step
        s_plus = float((forward(model, a).values * G).sum())
        arr[idx] = keep - step
        s_minus = float((forward(model, a).values * G).sum())
        arr[idx] = keep
        fd = (s_plus - s_minus) / (2.0 * step)
        an = float(grads[name][idx])
        rel = abs(an - fd) / max(abs(an), abs(fd), 1e-8)
        worst = max(worst, rel)
    return worst

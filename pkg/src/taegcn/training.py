"""Training loop, evaluation metrics, and ablation construction.

Training minimizes masked MAE in the target's original units: predictions
are denormalized before the loss so the reported numbers and the optimized
quantity agree. Evaluation reduces in fixed window order regardless of how
many worker threads compute the batches, so reports are bit-reproducible.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tensor
from .data import NormStats, Window
from .errors import ConfigError, DataError, DivergenceError
from .network import ModelConfig, TaegcnNetwork, masked_mae_loss

__all__ = [
    "TrainConfig",
    "TrainHistory",
    "MetricsReport",
    "fit",
    "evaluate",
    "predict_windows",
    "persistence_forecast",
    "build_ablation",
    "ABLATION_VARIANTS",
]

ABLATION_VARIANTS = {
    "full": "full",
    "ablate_tmsa": "no_attention",
    "ablate_egc": "static_graph",
}


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 8
    epochs: int = 40
    seed: int = 0
    shuffle: bool = True
    patience: int | None = None
    grad_clip: float | None = None

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.patience is not None and self.patience < 1:
            raise ConfigError(f"patience must be >= 1 when set, got {self.patience}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError(f"grad_clip must be positive when set, got {self.grad_clip}")

    def to_dict(self) -> dict:
        return {"lr": self.lr, "weight_decay": self.weight_decay,
                "batch_size": self.batch_size, "epochs": self.epochs,
                "seed": self.seed, "shuffle": self.shuffle,
                "patience": self.patience, "grad_clip": self.grad_clip}

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown training option(s): {sorted(unknown)}")
        return cls(**raw)


@dataclass
class TrainHistory:
    """One entry per epoch actually run. ``seconds`` is wall time and is
    the only field two identically seeded runs may disagree on."""

    train_loss: list[float] = field(default_factory=list)
    val_mae: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    best_epoch: int = -1

    def __len__(self) -> int:
        return len(self.train_loss)

    def to_dict(self) -> dict:
        return {"train_loss": self.train_loss, "val_mae": self.val_mae,
                "seconds": self.seconds, "best_epoch": self.best_epoch}

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainHistory":
        return cls(train_loss=list(raw.get("train_loss", [])),
                   val_mae=list(raw.get("val_mae", [])),
                   seconds=list(raw.get("seconds", [])),
                   best_epoch=int(raw.get("best_epoch", -1)))


@dataclass
class MetricsReport:
    """MAE/RMSE/MAPE per forecast step and aggregated, original units.

    ``mape`` values are fractions (1.0 means 100%); rendering converts.
    ``counts`` are unmasked targets per step; ``mape_counts`` additionally
    drop targets with magnitude at or below the missing marker, which
    would blow up the relative error.
    """

    mae: list[float]
    rmse: list[float]
    mape: list[float]
    counts: list[int]
    mape_counts: list[int]
    aggregate_mae: float
    aggregate_rmse: float
    aggregate_mape: float
    window_count: int
    sample_count: int

    def to_dict(self) -> dict:
        steps = [{"step": i + 1, "mae": self.mae[i], "rmse": self.rmse[i],
                  "mape": self.mape[i], "count": self.counts[i],
                  "mape_count": self.mape_counts[i]}
                 for i in range(len(self.mae))]
        return {"per_step": steps,
                "aggregate": {"mae": self.aggregate_mae, "rmse": self.aggregate_rmse,
                              "mape": self.aggregate_mape},
                "window_count": self.window_count,
                "sample_count": self.sample_count}

    def render_table(self) -> str:
        rows = [("step", "mae", "rmse", "mape", "targets")]
        for i in range(len(self.mae)):
            rows.append((str(i + 1), f"{self.mae[i]:.6f}", f"{self.rmse[i]:.6f}",
                         f"{100.0 * self.mape[i]:.4f}%", str(self.counts[i])))
        rows.append(("all", f"{self.aggregate_mae:.6f}", f"{self.aggregate_rmse:.6f}",
                     f"{100.0 * self.aggregate_mape:.4f}%", str(self.sample_count)))
        widths = [max(len(row[i]) for row in rows) for i in range(5)]
        lines = ["  ".join(cell.rjust(widths[i]) for i, cell in enumerate(row))
                 for row in rows]
        return "\n".join(lines)


def _thread_count() -> int:
    raw = os.environ.get("TAEGCN_THREADS", "1")
    try:
        count = int(raw)
    except ValueError as exc:
        raise ConfigError(f"TAEGCN_THREADS must be an integer, got {raw!r}") from exc
    if count < 1:
        raise ConfigError(f"TAEGCN_THREADS must be >= 1, got {count}")
    return count


def _stack_batch(windows: list[Window], indices) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    xs = np.stack([windows[i].x for i in indices])
    ys = np.stack([windows[i].y for i in indices])
    seen = np.stack([windows[i].y_observed for i in indices])
    return xs, ys, seen


def _denorm(pred: Tensor, stats: NormStats, channel: int) -> Tensor:
    return pred * float(stats.std[channel]) + float(stats.mean[channel])


def _clip_gradients(net: TaegcnNetwork, limit: float) -> None:
    total = 0.0
    for _, p in net.store.items():
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    norm = np.sqrt(total)
    if norm > limit:
        scale = limit / norm
        for _, p in net.store.items():
            if p.grad is not None:
                p.grad = p.grad * scale


def fit(net: TaegcnNetwork, train_windows: list[Window], val_windows: list[Window],
        cfg: TrainConfig, stats: NormStats, on_epoch=None) -> TrainHistory:
    """Train ``net`` in place; returns the per-epoch history.

    Every epoch shuffles the training windows (when enabled), steps Adam
    over minibatches of denormalized masked MAE, then scores validation
    MAE. The weights of the best validation epoch are restored at the end.
    A non-finite loss aborts immediately, naming epoch and batch.
    ``on_epoch`` is called after each epoch with (epoch, train_loss,
    val_mae, seconds).
    """
    if not train_windows:
        raise ConfigError("no training windows")
    if not val_windows:
        raise ConfigError("no validation windows")
    channel = net.config.target_channel
    optimizer = Adam(net.store, lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    history = TrainHistory()
    best_mae = np.inf
    best_state: dict[str, np.ndarray] | None = None
    stale = 0

    for epoch in range(cfg.epochs):
        started = time.monotonic()
        order = rng.permutation(len(train_windows)) if cfg.shuffle \
            else np.arange(len(train_windows))
        loss_sum = 0.0
        loss_batches = 0
        for batch_index, lo in enumerate(range(0, len(order), cfg.batch_size)):
            xs, ys, seen = _stack_batch(train_windows, order[lo:lo + cfg.batch_size])
            pred = _denorm(net.forward(Tensor(xs)), stats, channel)
            loss = masked_mae_loss(pred, ys, observed=seen)
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError(f"non-finite training loss {value} at "
                                      f"epoch {epoch} batch {batch_index}")
            net.store.zero_grad()
            ad.backward(loss)
            if cfg.grad_clip is not None:
                _clip_gradients(net, cfg.grad_clip)
            optimizer.step()
            loss_sum += value
            loss_batches += 1

        val_mae = _masked_mae_over(net, val_windows, stats, cfg.batch_size)
        history.train_loss.append(loss_sum / loss_batches)
        history.val_mae.append(val_mae)
        history.seconds.append(time.monotonic() - started)
        if on_epoch is not None:
            on_epoch(epoch, history.train_loss[-1], val_mae, history.seconds[-1])

        if val_mae < best_mae:
            best_mae = val_mae
            best_state = net.store.state_dict()
            history.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if cfg.patience is not None and stale >= cfg.patience:
                break

    if best_state is not None:
        net.store.load_state_dict(best_state)
    return history


def predict_windows(net: TaegcnNetwork, windows: list[Window], stats: NormStats,
                    batch_size: int = 8) -> np.ndarray:
    """Denormalized forecasts for every window, [windows, nodes, horizon].

    Batches may run on TAEGCN_THREADS workers; outputs are assembled in
    window order either way.
    """
    if not windows:
        raise ConfigError("no windows to predict")
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    channel = net.config.target_channel
    spans = [(lo, min(lo + batch_size, len(windows)))
             for lo in range(0, len(windows), batch_size)]

    def run(span) -> np.ndarray:
        lo, hi = span
        xs = np.stack([windows[i].x for i in range(lo, hi)])
        with ad.no_grad():
            pred = _denorm(net.forward(Tensor(xs)), stats, channel)
        return pred.data

    threads = _thread_count()
    if threads == 1:
        parts = [run(span) for span in spans]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, spans))
    return np.concatenate(parts, axis=0)


def _masked_mae_over(net: TaegcnNetwork, windows: list[Window], stats: NormStats,
                     batch_size: int) -> float:
    preds = predict_windows(net, windows, stats, batch_size)
    ys = np.stack([w.y for w in windows])
    seen = np.stack([w.y_observed for w in windows])
    if not seen.any():
        raise DataError("every target is missing; nothing to score")
    return float(np.abs(preds - ys)[seen].mean())


def evaluate(net: TaegcnNetwork, windows: list[Window], stats: NormStats,
             batch_size: int = 8, missing_marker: float = 0.0) -> MetricsReport:
    """Score denormalized forecasts per step and overall.

    MAE and RMSE run over unmasked targets; MAPE further drops targets
    whose magnitude is at or below ``|missing_marker|``, where a relative
    error is meaningless. Accumulation is in fixed window order.
    """
    preds = predict_windows(net, windows, stats, batch_size)
    ys = np.stack([w.y for w in windows])
    seen = np.stack([w.y_observed for w in windows])
    if not seen.any():
        raise DataError("every test target is missing; nothing to evaluate")
    marker = abs(float(missing_marker))
    horizon = ys.shape[-1]
    err = preds - ys

    mae, rmse, mape, counts, mape_counts = [], [], [], [], []
    for step in range(horizon):
        mask = seen[..., step]
        gaps = err[..., step][mask]
        if gaps.size == 0:
            raise DataError(f"no unmasked targets at forecast step {step + 1}")
        mae.append(float(np.abs(gaps).mean()))
        rmse.append(float(np.sqrt(np.mean(gaps * gaps))))
        counts.append(int(mask.sum()))
        ratio_mask = mask & (np.abs(ys[..., step]) > marker)
        ratios = np.abs(err[..., step][ratio_mask]) / np.abs(ys[..., step][ratio_mask])
        mape_counts.append(int(ratio_mask.sum()))
        mape.append(float(ratios.mean()) if ratios.size else 0.0)

    all_gaps = err[seen]
    ratio_mask = seen & (np.abs(ys) > marker)
    all_ratios = np.abs(err[ratio_mask]) / np.abs(ys[ratio_mask])
    return MetricsReport(
        mae=mae, rmse=rmse, mape=mape, counts=counts, mape_counts=mape_counts,
        aggregate_mae=float(np.abs(all_gaps).mean()),
        aggregate_rmse=float(np.sqrt(np.mean(all_gaps * all_gaps))),
        aggregate_mape=float(all_ratios.mean()) if all_ratios.size else 0.0,
        window_count=len(windows),
        sample_count=int(seen.sum()),
    )


def persistence_forecast(windows: list[Window], stats: NormStats,
                         target_channel: int, missing_marker: float = 0.0) -> np.ndarray:
    """Last-observed-value baseline, [windows, nodes, horizon], original units.

    Walks each input window backwards to the latest non-marker entry of
    the target channel; a window with no observation falls back to the
    channel mean.
    """
    if not windows:
        raise ConfigError("no windows to predict")
    mean = float(stats.mean[target_channel])
    std = float(stats.std[target_channel])
    horizon = windows[0].y.shape[-1]
    out = np.empty((len(windows), windows[0].x.shape[0], horizon))
    for w, window in enumerate(windows):
        series = window.x[:, :, target_channel]
        for node in range(series.shape[0]):
            value = mean
            for t in range(series.shape[1] - 1, -1, -1):
                if series[node, t] != missing_marker:
                    value = series[node, t] * std + mean
                    break
            out[w, node, :] = value
    return out


def build_ablation(variant: str, config: ModelConfig, in_channels: int) -> TaegcnNetwork:
    """Construct the full model or one of its two reduced forms.

    ``ablate_tmsa`` swaps attention for a two-tap dilated causal
    convolution; ``ablate_egc`` freezes the node graph at its initial
    static estimate.
    """
    if variant not in ABLATION_VARIANTS:
        raise ConfigError(f"variant must be one of {sorted(ABLATION_VARIANTS)}, "
                          f"got {variant!r}")
    return TaegcnNetwork(config, in_channels=in_channels,
                         variant=ABLATION_VARIANTS[variant])

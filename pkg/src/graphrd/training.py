"""Losses, Adam with parameter groups, full-batch training loops,
grid search, and the depth study.

Three optimizer groups mirror the parameter layout: embedding/readout,
diffusion, and reaction weights, each with its own learning rate and
decoupled weight decay. All randomness in a run flows from a single seed.
"""

from __future__ import annotations

import dataclasses
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .datasets import DataError, Dataset, TemporalDataset
from .graph import normalized_laplacian
from .ioutil import derive_seed
from .model import ModelConfig, ModelParams, forward, group_of, init_params

MAX_EPOCHS = 1500

LR_RANGE = (1e-4, 1e-1)
WD_RANGE = (0.0, 1e-2)
DROPOUT_RANGE = (0.0, 0.9)
H_RANGE = (1e-3, 1.0)
LAYER_CHOICES = (2, 4, 8, 16, 32, 64)
CHANNEL_CHOICES = (8, 16, 32, 64, 128, 256)


class TrainingError(RuntimeError):
    """Raised when a run cannot proceed (non-finite loss, bad inputs)."""


@dataclass
class TrainConfig:
    """Per-group learning rates / weight decays plus loop controls."""

    lr_embed: float = 1e-2
    lr_diffusion: float = 1e-2
    lr_reaction: float = 1e-2
    wd_embed: float = 0.0
    wd_diffusion: float = 0.0
    wd_reaction: float = 0.0
    epochs: int = 200
    patience: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.epochs > MAX_EPOCHS:
            raise TrainingError(f"epochs must lie in [1, {MAX_EPOCHS}], got {self.epochs}")
        if self.patience < 1:
            raise TrainingError(f"patience must be >= 1, got {self.patience}")
        for name in ("lr_embed", "lr_diffusion", "lr_reaction"):
            if getattr(self, name) < 0:
                raise TrainingError(f"{name} must be non-negative")
        for name in ("wd_embed", "wd_diffusion", "wd_reaction"):
            if getattr(self, name) < 0:
                raise TrainingError(f"{name} must be non-negative")

    def groups(self) -> dict[str, dict[str, float]]:
        return {
            "embed_out": {"lr": self.lr_embed, "wd": self.wd_embed},
            "diffusion": {"lr": self.lr_diffusion, "wd": self.wd_diffusion},
            "reaction": {"lr": self.lr_reaction, "wd": self.wd_reaction},
        }


@dataclass
class Metrics:
    """Outcome of one run: per-split metric values, the loss curve, and
    wall-clock seconds per epoch."""

    task: str
    accuracy: Optional[dict[str, float]] = None
    mse: Optional[dict[str, float]] = None
    loss_curve: list = field(default_factory=list)
    val_curve: list = field(default_factory=list)
    epoch_seconds: list = field(default_factory=list)
    best_epoch: Optional[int] = None

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "accuracy": self.accuracy,
            "mse": self.mse,
            "loss_curve": [float(v) for v in self.loss_curve],
            "val_curve": [float(v) for v in self.val_curve],
            "epoch_seconds": [float(v) for v in self.epoch_seconds],
            "best_epoch": self.best_epoch,
        }


# ---------------------------------------------------------------------------
# Losses (tape ops)
# ---------------------------------------------------------------------------

def cross_entropy_loss(logits: Tensor, labels: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean negative log softmax over the masked rows, stabilized by
    row-max subtraction."""
    labels = np.asarray(labels, dtype=np.int64)
    mask = np.asarray(mask, dtype=np.int64)
    if mask.size == 0:
        raise TrainingError("empty mask")
    c_out = logits.shape[1]
    picked = labels[mask]
    if picked.min() < 0 or picked.max() >= c_out:
        raise TrainingError(f"label outside [0, {c_out}) in the masked rows")

    rows = logits.values[mask]
    z = rows - rows.max(axis=1, keepdims=True)
    expz = np.exp(z)
    probs = expz / expz.sum(axis=1, keepdims=True)
    logp = z - np.log(expz.sum(axis=1, keepdims=True))
    loss = -float(np.mean(logp[np.arange(mask.size), picked]))

    tape = logits.tape

    def bwd(g: np.ndarray) -> None:
        local = probs.copy()
        local[np.arange(mask.size), picked] -= 1.0
        local /= mask.size
        full = np.zeros_like(logits.values)
        full[mask] = local * g[0, 0]
        tape.add_grad(logits, full)

    return tape.record(np.array([[loss]]), (logits,), bwd, "cross_entropy")


def mse_loss(pred: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean squared deviation over the masked rows (all entries)."""
    target = np.asarray(target, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.int64)
    if mask.size == 0:
        raise TrainingError("empty mask")
    diff = pred.values[mask] - target[mask]
    loss = float(np.mean(diff * diff))
    tape = pred.tape

    def bwd(g: np.ndarray) -> None:
        full = np.zeros_like(pred.values)
        full[mask] = (2.0 / diff.size) * diff * g[0, 0]
        tape.add_grad(pred, full)

    return tape.record(np.array([[loss]]), (pred,), bwd, "mse")


def accuracy(logits: np.ndarray, labels: np.ndarray, mask: np.ndarray) -> float:
    mask = np.asarray(mask, dtype=np.int64)
    pred = np.argmax(logits[mask], axis=1)
    return float(np.mean(pred == labels[mask]))


# ---------------------------------------------------------------------------
# Adam with parameter groups and decoupled weight decay
# ---------------------------------------------------------------------------

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0


def adam_init(values: dict[str, np.ndarray]) -> AdamState:
    return AdamState(m={k: np.zeros_like(v) for k, v in values.items()},
                     v={k: np.zeros_like(v) for k, v in values.items()})


def adam_step(values: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              groups: dict[str, dict[str, float]], state: AdamState) -> None:
    """One bias-corrected Adam update in place. Weight decay is decoupled:
    each parameter additionally shrinks by lr * wd * param for its group."""
    state.step += 1
    t = state.step
    for name, p in values.items():
        g = grads[name]
        if g.shape != p.shape:
            raise TrainingError(f"gradient shape {g.shape} vs parameter {p.shape} for {name}")
        opts = groups[group_of(name)]
        lr, wd = opts["lr"], opts["wd"]
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1 - ADAM_BETA2) * g * g
        m_hat = m / (1 - ADAM_BETA1 ** t)
        v_hat = v / (1 - ADAM_BETA2 ** t)
        p -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        if wd > 0:
            p -= lr * wd * p


# ---------------------------------------------------------------------------
# Node classification
# ---------------------------------------------------------------------------

def train_node_classification(dataset: Dataset, model_cfg: ModelConfig,
                              train_cfg: TrainConfig, split: str = "0"
                              ) -> tuple[ModelParams, Metrics]:
    """Full-batch training with early stopping on validation accuracy.

    The best-validation checkpoint is restored before the final
    evaluation, so the reported test accuracy belongs to the best epoch.
    Deterministic under a fixed seed.
    """
    if dataset.labels is None:
        raise TrainingError("node classification needs labels")
    if split not in dataset.splits:
        raise TrainingError(f"dataset has no split named {split!r}")
    parts = dataset.splits[split]
    train_idx, val_idx, test_idx = parts["train"], parts["val"], parts["test"]

    X, y = dataset.features, dataset.labels
    lap = normalized_laplacian(dataset.graph)
    rng = np.random.default_rng(derive_seed(train_cfg.seed, 0))
    params = init_params(model_cfg, seed=derive_seed(train_cfg.seed, 1))
    state = adam_init(params.values)
    groups = train_cfg.groups()

    metrics = Metrics(task="classification")
    best_val = -np.inf
    best_params = params.copy()
    best_epoch = -1
    strikes = 0

    for epoch in range(train_cfg.epochs):
        t0 = time.perf_counter()
        fp = forward(X, dataset.graph, params, training=True, rng=rng, lap=lap)
        loss = cross_entropy_loss(fp.output, y, train_idx)
        loss_value = float(loss.values[0, 0])
        if not np.isfinite(loss_value):
            raise TrainingError(f"non-finite training loss {loss_value} at epoch {epoch}")
        ad.backward(fp.tape, loss)
        grads = {name: leaf.grad for name, leaf in fp.leaves.items()}
        adam_step(params.values, grads, groups, state)

        eval_fp = forward(X, dataset.graph, params, training=False, lap=lap)
        val_acc = accuracy(eval_fp.output.values, y, val_idx)
        metrics.loss_curve.append(loss_value)
        metrics.val_curve.append(val_acc)
        metrics.epoch_seconds.append(time.perf_counter() - t0)

        if val_acc > best_val:
            best_val = val_acc
            best_params = params.copy()
            best_epoch = epoch
            strikes = 0
        else:
            strikes += 1
            if strikes >= train_cfg.patience:
                break

    final = forward(X, dataset.graph, best_params, training=False, lap=lap)
    metrics.accuracy = {
        "train": accuracy(final.output.values, y, train_idx),
        "val": accuracy(final.output.values, y, val_idx),
        "test": accuracy(final.output.values, y, test_idx),
    }
    metrics.best_epoch = best_epoch
    return best_params, metrics


# ---------------------------------------------------------------------------
# Spatio-temporal regression
# ---------------------------------------------------------------------------

def train_spatiotemporal(dataset: TemporalDataset, model_cfg: ModelConfig,
                         train_cfg: TrainConfig, mode: str = "incremental",
                         train_fraction: float = 0.9) -> tuple[ModelParams, Metrics]:
    """Next-step forecasting over a chronological train/test split.

    incremental -- optimizer update after every training snapshot's loss;
    cumulative  -- snapshot losses are averaged and applied as one update
                   per epoch.
    """
    if mode not in ("incremental", "cumulative"):
        raise TrainingError(f"unknown training mode {mode!r}")
    dataset.validate()
    snaps = dataset.snapshots
    stamps = dataset.timestamps
    n_train = min(len(snaps) - 1, max(1, int(train_fraction * len(snaps))))

    lap = normalized_laplacian(dataset.graph)
    rng = np.random.default_rng(derive_seed(train_cfg.seed, 0))
    params = init_params(model_cfg, seed=derive_seed(train_cfg.seed, 1))
    state = adam_init(params.values)
    groups = train_cfg.groups()
    all_nodes = np.arange(dataset.graph.n)

    metrics = Metrics(task="regression")
    for epoch in range(train_cfg.epochs):
        t0 = time.perf_counter()
        losses = []
        if mode == "incremental":
            for k in range(n_train):
                fp = forward(snaps[k].features, dataset.graph, params, training=True,
                             rng=rng, lap=lap, t_offset=float(stamps[k]))
                loss = mse_loss(fp.output, snaps[k].target, all_nodes)
                value = float(loss.values[0, 0])
                if not np.isfinite(value):
                    raise TrainingError(f"non-finite loss at epoch {epoch}, snapshot {k}")
                ad.backward(fp.tape, loss)
                grads = {name: leaf.grad for name, leaf in fp.leaves.items()}
                adam_step(params.values, grads, groups, state)
                losses.append(value)
        else:
            acc_grads = {name: np.zeros_like(v) for name, v in params.values.items()}
            for k in range(n_train):
                fp = forward(snaps[k].features, dataset.graph, params, training=True,
                             rng=rng, lap=lap, t_offset=float(stamps[k]))
                loss = mse_loss(fp.output, snaps[k].target, all_nodes)
                value = float(loss.values[0, 0])
                if not np.isfinite(value):
                    raise TrainingError(f"non-finite loss at epoch {epoch}, snapshot {k}")
                ad.backward(fp.tape, loss)
                for name, leaf in fp.leaves.items():
                    acc_grads[name] += leaf.grad
                losses.append(value)
            for name in acc_grads:
                acc_grads[name] /= n_train
            adam_step(params.values, acc_grads, groups, state)
        metrics.loss_curve.append(float(np.mean(losses)))
        metrics.epoch_seconds.append(time.perf_counter() - t0)

    def split_mse(indices) -> float:
        vals = []
        for k in indices:
            fp = forward(snaps[k].features, dataset.graph, params, training=False,
                         lap=lap, t_offset=float(stamps[k]))
            loss = mse_loss(fp.output, snaps[k].target, all_nodes)
            vals.append(float(loss.values[0, 0]))
        return float(np.mean(vals))

    metrics.mse = {
        "train": split_mse(range(n_train)),
        "test": split_mse(range(n_train, len(snaps))),
    }
    return params, metrics


# ---------------------------------------------------------------------------
# Grid search
# ---------------------------------------------------------------------------

@dataclass
class SearchSpace:
    """Sampling ranges: log-uniform learning rates, uniform weight decays,
    dropouts, and step size, discrete-uniform layer and channel counts.
    Fixed architecture fields ride along unchanged."""

    lr_range: tuple[float, float] = LR_RANGE
    wd_range: tuple[float, float] = WD_RANGE
    dropout_range: tuple[float, float] = DROPOUT_RANGE
    h_range: tuple[float, float] = H_RANGE
    layer_choices: tuple[int, ...] = LAYER_CHOICES
    channel_choices: tuple[int, ...] = CHANNEL_CHOICES
    variant: str = "I"
    integration: str = "imex"
    reaction_mode: str = "all"
    epochs: int = 200
    patience: int = 100

    def __post_init__(self):
        for lo, hi in (self.lr_range, self.wd_range, self.dropout_range, self.h_range):
            if lo > hi:
                raise TrainingError(f"invalid range [{lo}, {hi}]")
        if self.lr_range[0] <= 0:
            raise TrainingError("learning-rate range must be positive for log sampling")
        if not self.layer_choices or not self.channel_choices:
            raise TrainingError("empty discrete choice set")

    def sample_lr(self, rng: np.random.Generator) -> float:
        lo, hi = np.log10(self.lr_range[0]), np.log10(self.lr_range[1])
        return float(10.0 ** rng.uniform(lo, hi))

    def sample(self, rng: np.random.Generator, c_in: int, c_out: int
               ) -> tuple[ModelConfig, TrainConfig]:
        model_cfg = ModelConfig(
            c_in=c_in, c_out=c_out, variant=self.variant,
            layers=int(rng.choice(self.layer_choices)),
            channels=int(rng.choice(self.channel_choices)),
            h=float(rng.uniform(*self.h_range)),
            integration=self.integration, reaction_mode=self.reaction_mode,
            input_dropout=float(rng.uniform(*self.dropout_range)),
            output_dropout=float(rng.uniform(*self.dropout_range)),
            hidden_dropout=float(rng.uniform(*self.dropout_range)),
        )
        train_cfg = TrainConfig(
            lr_embed=self.sample_lr(rng), lr_diffusion=self.sample_lr(rng),
            lr_reaction=self.sample_lr(rng),
            wd_embed=float(rng.uniform(*self.wd_range)),
            wd_diffusion=float(rng.uniform(*self.wd_range)),
            wd_reaction=float(rng.uniform(*self.wd_range)),
            epochs=self.epochs, patience=self.patience,
        )
        return model_cfg, train_cfg


def _run_grid_entry(args) -> dict:
    dataset, model_cfg, train_cfg, split, index = args
    _, metrics = train_node_classification(dataset, model_cfg, train_cfg, split=split)
    return {
        "index": index,
        "model_config": model_cfg.to_dict(),
        "train_config": dataclasses.asdict(train_cfg),
        "val_accuracy": metrics.accuracy["val"],
        "test_accuracy": metrics.accuracy["test"],
        "best_epoch": metrics.best_epoch,
    }


def grid_search(dataset: Dataset, space: SearchSpace, budget: int, seed: int = 0,
                split: str = "0", jobs: int = 1) -> list[dict]:
    """Sample ``budget`` configurations, train each, and rank by validation
    accuracy (descending). Runs are independent, with per-run seeds derived
    from (master seed, index), so concurrency does not change results."""
    if budget < 1:
        raise TrainingError(f"budget must be >= 1, got {budget}")
    if dataset.labels is None:
        raise TrainingError("grid search ranks by validation accuracy; labels required")
    sampler = np.random.default_rng(derive_seed(seed, 997))
    c_out = dataset.num_classes
    tasks = []
    for index in range(budget):
        model_cfg, train_cfg = space.sample(sampler, dataset.features.shape[1], c_out)
        train_cfg = dataclasses.replace(train_cfg, seed=derive_seed(seed, index))
        tasks.append((dataset, model_cfg, train_cfg, split, index))

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_grid_entry, tasks))
    else:
        results = [_run_grid_entry(t) for t in tasks]

    results.sort(key=lambda r: (-r["val_accuracy"], r["index"]))
    for rank, row in enumerate(results):
        row["rank"] = rank
    return results


# ---------------------------------------------------------------------------
# Depth study
# ---------------------------------------------------------------------------

def depth_study(dataset: Dataset, base_cfg: ModelConfig, train_cfg: TrainConfig,
                depths=(1, 2, 4, 8, 12, 16, 32, 64),
                reaction_modes: Optional[tuple[str, ...]] = None,
                split: str = "0") -> list[dict]:
    """Accuracy versus depth, one trained model per (depth, reaction mode).
    Rows come back in depth-major order, ready for CSV emission."""
    modes = reaction_modes or (base_cfg.reaction_mode,)
    rows = []
    for mode_index, mode in enumerate(modes):
        for depth in depths:
            cfg = dataclasses.replace(base_cfg, layers=int(depth), reaction_mode=mode)
            tc = dataclasses.replace(train_cfg, seed=derive_seed(train_cfg.seed, depth,
                                                                 mode_index))
            _, metrics = train_node_classification(dataset, cfg, tc, split=split)
            rows.append({
                "depth": int(depth),
                "reaction_mode": mode,
                "variant": cfg.variant,
                "val_accuracy": metrics.accuracy["val"],
                "test_accuracy": metrics.accuracy["test"],
            })
    return rows

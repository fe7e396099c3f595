"""Supervised force training: O(3)-augmented batches, decoupled-weight-decay
adaptive optimizer with global-norm clipping, cosine schedule with linear warmup.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .data import Dataset, MolecularSystem
from .model import EncodedBatch, ModelConfig, forward_forces, init_params, masked_force_loss
from .params import ParameterStore
from .rotations import random_o3_matrix


class TrainingDivergence(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"loss became non-finite at step {step}")
        self.step = step


class OptimizerError(RuntimeError):
    """Non-finite gradient; message names the parameter path."""


@dataclass
class TrainConfig:
    learning_rate: float = 5e-4  # peak
    init_lr: float = 1e-6
    min_lr: float = 5e-8
    warmup_steps: int = 500
    total_steps: int = 5000
    batch_size: int = 16  # source systems per step, doubled by augmentation
    weight_decay: float = 1e-7
    grad_clip: float = 1.0
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError("need 0 <= warmup_steps < total_steps")
        for name in ("learning_rate", "init_lr", "min_lr"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @classmethod
    def from_dict(cls, kv: dict) -> "TrainConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name in kv:
                raw = kv[f.name]
                kwargs[f.name] = int(raw) if f.type == "int" else float(raw)
        unknown = set(kv) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**kwargs)


PAPER_TRAIN_PRESET = dict(
    learning_rate=5e-4,
    init_lr=1e-6,
    min_lr=5e-8,
    warmup_steps=5000,
    total_steps=880_000,
    batch_size=512,  # 1024 after augmentation
    weight_decay=1e-7,
    grad_clip=1.0,
)


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentedBatch:
    """Two transformed copies per source system, each with its operator."""

    items: list[tuple[MolecularSystem, np.ndarray]]

    def systems(self) -> list[MolecularSystem]:
        return [s for s, _ in self.items]


def augment(batch: list[MolecularSystem], rng: np.random.Generator) -> AugmentedBatch:
    """Duplicate the batch; apply an independent uniform O(3) operator to each copy.

    Positions and reference forces transform by the same operator, so labels
    stay consistent with the rotated/reflected geometry.
    """
    if not batch:
        raise ValueError("cannot augment an empty batch")
    items = []
    for system in batch:
        for _ in range(2):
            op = random_o3_matrix(rng)
            items.append((system.transformed(op), op))
    return AugmentedBatch(items)


# ---------------------------------------------------------------------------
# schedule and optimizer


def cosine_warmup_lr(step: int, cfg: TrainConfig) -> float:
    """Linear ramp init_lr -> peak over warmup, cosine decay to min_lr at the end."""
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    if step == cfg.warmup_steps:
        return cfg.learning_rate
    if step == cfg.total_steps:
        return cfg.min_lr
    if step < cfg.warmup_steps:
        frac = step / cfg.warmup_steps
        return cfg.init_lr + (cfg.learning_rate - cfg.init_lr) * frac
    t = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.min_lr + 0.5 * (cfg.learning_rate - cfg.min_lr) * (1.0 + np.cos(np.pi * t))


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    total = np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if total <= max_norm or total == 0.0:
        return grads
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}


def optimizer_step(
    store: ParameterStore,
    grads: dict[str, np.ndarray],
    state: AdamState,
    cfg: TrainConfig,
    lr: float,
) -> None:
    """AdamW with decoupled weight decay; global-norm clip happens before moments."""
    for path, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise OptimizerError(f"non-finite gradient for parameter {path!r}")
    grads = clip_global_norm(grads, cfg.grad_clip)
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    for path, g in grads.items():
        g64 = g.astype(np.float64)
        m = state.m.get(path)
        v = state.v.get(path)
        if m is None:
            m = np.zeros_like(g64)
            v = np.zeros_like(g64)
        m = b1 * m + (1 - b1) * g64
        v = b2 * v + (1 - b2) * g64 * g64
        state.m[path] = m
        state.v[path] = v
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        p = store[path].data.astype(np.float64)
        p = p - lr * (mhat / (np.sqrt(vhat) + cfg.adam_eps) + cfg.weight_decay * p)
        store.assign(path, p.astype(store[path].data.dtype))


# ---------------------------------------------------------------------------
# the loop


@dataclass
class TrainResult:
    params: ParameterStore
    metrics: list[dict]
    final_val_mae: Optional[float]


def validation_force_mae(
    params: ParameterStore,
    model_cfg: ModelConfig,
    systems: list[MolecularSystem],
    batch_size: int = 32,
) -> float:
    """Mean per-atom residual norm over a labeled system list."""
    dtype = ad.default_dtype()
    total, count = 0.0, 0
    for i in range(0, len(systems), batch_size):
        chunk = systems[i : i + batch_size]
        enc = EncodedBatch(chunk, model_cfg, dtype)
        pred = forward_forces(enc, params, ad.tensor(enc.positions)).data
        for row, s in enumerate(chunk):
            n = s.n_atoms
            resid = pred[row, :n] - s.forces
            total += float(np.linalg.norm(resid, axis=1).sum())
            count += n
    return total / count


def train(
    train_set: Dataset,
    val_set: Dataset,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    initial_params: Optional[ParameterStore] = None,
    on_step: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    """Run the supervised loop; returns final parameters and the metrics rows.

    Metrics rows carry (step, lr, loss) every step and val_mae at epoch
    boundaries and at the final step. Fixed seeds give bit-identical runs.
    """
    if len(train_set) == 0:
        raise ValueError("training dataset is empty")
    for s in list(train_set) + list(val_set):
        if s.forces is None:
            raise ValueError("every system needs reference forces to train on")
    dtype = ad.default_dtype()
    params = initial_params or init_params(model_cfg, seed=cfg.seed, dtype=dtype)
    seq = np.random.SeedSequence(cfg.seed).spawn(2)
    rng_data = np.random.default_rng(seq[0])
    rng_aug = np.random.default_rng(seq[1])
    state = AdamState()
    metrics: list[dict] = []
    paths = params.paths()

    n_train = len(train_set)
    steps_per_epoch = max(1, (n_train + cfg.batch_size - 1) // cfg.batch_size)
    order = rng_data.permutation(n_train)
    cursor = 0
    val_mae = None

    for step in range(1, cfg.total_steps + 1):
        if cursor + cfg.batch_size > n_train:
            order = rng_data.permutation(n_train)
            cursor = 0
        picks = order[cursor : cursor + cfg.batch_size]
        cursor += cfg.batch_size
        batch = [train_set.systems[i] for i in picks]
        aug = augment(batch, rng_aug)
        systems = aug.systems()
        enc = EncodedBatch(systems, model_cfg, dtype)
        targets = np.zeros((len(systems), enc.max_atoms, 3))
        for row, s in enumerate(systems):
            targets[row, : s.n_atoms] = s.forces

        with ad.Tape() as tape:
            pred = forward_forces(enc, params, ad.tensor(enc.positions))
            loss = masked_force_loss(pred, targets, enc.atom_mask)
        loss_val = float(loss.data)
        if not np.isfinite(loss_val):
            raise TrainingDivergence(step)
        grad_list = tape.gradients(loss, [params[p] for p in paths])
        grads = dict(zip(paths, grad_list))
        lr = cosine_warmup_lr(step, cfg)
        optimizer_step(params, grads, state, cfg, lr)

        row = {"step": step, "lr": lr, "loss": loss_val, "val_mae": None}
        epoch_end = step % steps_per_epoch == 0 or step == cfg.total_steps
        if epoch_end and len(val_set) > 0:
            val_mae = validation_force_mae(params, model_cfg, val_set.systems)
            row["val_mae"] = val_mae
        metrics.append(row)
        if on_step is not None:
            on_step(row)
    return TrainResult(params, metrics, val_mae)


def write_metrics_csv(path, metrics: list[dict]) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "lr", "loss", "val_mae"])
        for row in metrics:
            w.writerow(
                [
                    row["step"],
                    f"{row['lr']:.10g}",
                    f"{row['loss']:.10g}",
                    "" if row["val_mae"] is None else f"{row['val_mae']:.10g}",
                ]
            )

"""Training loop: loss assembly, decoupled-weight-decay Adam, early stopping."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import kernel as K
from .backbone import Decoder, logits_to_nll
from .corpus import Batch, Example, make_batch
from .map_head import MapConfig, MapHead, loss_total
from .sap import PruneConfig, make_hook

logger = logging.getLogger(__name__)

STEP_COLUMNS = ("step", "l_ntp", "l_map", "l_total", "wall_millis", "high_water_bytes")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, components: dict[str, float]) -> None:
        self.step = step
        self.components = components
        super().__init__(f"non-finite loss at step {step}: {components}")


class TrainConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 32
    max_steps: int = 2000
    eval_interval_steps: int = 200
    early_stop_patience: int = 10
    seed: int = 42
    deterministic: bool = False
    beam_width: int = 20
    eval_users: int | None = None  # cap on validation users per evaluation

    def __post_init__(self) -> None:
        for name in ("learning_rate", "batch_size", "max_steps", "eval_interval_steps"):
            if getattr(self, name) <= 0:
                raise TrainConfigError(f"{name} must be positive")
        if self.weight_decay < 0:
            raise TrainConfigError("weight_decay must be >= 0")
        if self.early_stop_patience < 1:
            raise TrainConfigError("early_stop_patience must be >= 1")


@dataclass
class StepRecord:
    step: int
    l_ntp: float
    l_map: float
    l_total: float
    wall_millis: float
    high_water_bytes: int


class AdamW:
    """Adam with decoupled weight decay: ``p *= 1 - lr*wd`` then the Adam step."""

    def __init__(self, params: Sequence[K.Tensor], lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0) -> None:
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = [K.Buffer(np.zeros_like(p.data)) for p in self.params]
        self._v = [K.Buffer(np.zeros_like(p.data)) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, mb, vb in zip(self.params, self._m, self._v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m, v = mb.array, vb.array
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        return {"t": self.t, "m": [b.array.copy() for b in self._m], "v": [b.array.copy() for b in self._v]}


class Trainer:
    """Owns one model, its optional auxiliary head and the optimizer state."""

    def __init__(
        self,
        model: Decoder,
        train_cfg: TrainConfig,
        prune_cfg: PruneConfig | None = None,
        map_cfg: MapConfig | None = None,
        map_head: MapHead | None = None,
    ) -> None:
        self.model = model
        self.cfg = train_cfg
        self.prune_cfg = prune_cfg
        self.hook = make_hook(prune_cfg)
        self.map_cfg = map_cfg or MapConfig(enabled=False)
        if self.map_cfg.enabled and map_head is None:
            map_head = MapHead(model.cfg.d_model, model.head, self.map_cfg, seed=train_cfg.seed)
        self.map_head = map_head if self.map_cfg.enabled else None
        params = model.parameters() + (self.map_head.parameters() if self.map_head else [])
        self.optimizer = AdamW(params, lr=train_cfg.learning_rate, weight_decay=train_cfg.weight_decay)
        self.dropout_rng = K.make_rng(train_cfg.seed, 4)
        self.step_count = 0

    def losses(self, batch: Batch, training: bool = True):
        trace = self.model.forward(
            batch.input_ids,
            batch.valid,
            prune_hook=self.hook,
            training=training,
            rng=self.dropout_rng,
            logits_last=batch.targets.shape[1],
        )
        l_ntp = logits_to_nll(trace.logits, batch.targets)
        if self.map_head is not None:
            l_map = self.map_head.loss(trace.hidden, batch.targets)
            total = loss_total(l_ntp, l_map, self.map_cfg.lam)
        else:
            l_map = K.Tensor(0.0)
            total = l_ntp
        return l_ntp, l_map, total

    def train_step(self, batch: Batch) -> StepRecord:
        self.optimizer.zero_grad()
        K.allocator_reset_highwater()
        t0 = time.perf_counter()
        with K.deterministic(self.cfg.deterministic or K.is_deterministic()):
            l_ntp, l_map, total = self.losses(batch, training=True)
            vals = {"l_ntp": float(l_ntp.data), "l_map": float(l_map.data), "l_total": float(total.data)}
            if not all(math.isfinite(v) for v in vals.values()):
                raise TrainingDiverged(self.step_count + 1, vals)
            total.backward()
            self.optimizer.step()
        del l_ntp, l_map, total
        wall = (time.perf_counter() - t0) * 1e3
        self.step_count += 1
        return StepRecord(self.step_count, vals["l_ntp"], vals["l_map"], vals["l_total"], wall, K.allocator_stats().high_water_bytes)


def train_step(model, map_head, batch, prune_cfg, map_cfg, optimizer_state: Trainer) -> StepRecord:
    """Functional spelling of :meth:`Trainer.train_step`; the trainer carries optimizer state."""
    return optimizer_state.train_step(batch)


class BatchSampler:
    """Shuffled epochs over training examples, deterministic per seed."""

    def __init__(self, examples: Sequence[Example], batch_size: int, seed: int) -> None:
        if not examples:
            raise TrainConfigError("training split is empty")
        self.examples = list(examples)
        self.batch_size = batch_size
        self.rng = K.make_rng(seed, 3)
        self._order = np.empty(0, dtype=np.int64)

    def next(self) -> list[Example]:
        while self._order.size < self.batch_size:
            self._order = np.concatenate([self._order, self.rng.permutation(len(self.examples))])
        take, self._order = self._order[: self.batch_size], self._order[self.batch_size :]
        return [self.examples[i] for i in take]


@dataclass
class TrainResult:
    best_state: dict[str, np.ndarray]
    log: list[StepRecord]
    stop_reason: str
    best_metric: float
    best_step: int
    evals: list[tuple[int, float]] = field(default_factory=list)


def run_training(
    trainer: Trainer,
    train_examples: Sequence[Example],
    val_examples: Sequence[Example],
    make: Callable[[Sequence[Example]], Batch],
    validate: Callable[[Decoder, Sequence[Example]], float],
    log_path: str | Path | None = None,
) -> TrainResult:
    """Train until ``max_steps`` or until validation stops improving.

    ``validate`` returns the monitored metric (Recall@10); evaluation happens
    every ``eval_interval_steps`` and after the final step.
    """
    cfg = trainer.cfg
    if not val_examples:
        raise TrainConfigError("validation split is empty")
    val = list(val_examples)
    if cfg.eval_users is not None:
        val = val[: cfg.eval_users]
    sampler = BatchSampler(train_examples, cfg.batch_size, cfg.seed)
    log: list[StepRecord] = []
    evals: list[tuple[int, float]] = []
    best, best_step, best_state = -math.inf, 0, trainer.model.state_dict()
    bad = 0
    reason = "max_steps"
    writer = _StepWriter(log_path) if log_path else None
    try:
        for step in range(1, cfg.max_steps + 1):
            rec = trainer.train_step(make(sampler.next()))
            log.append(rec)
            if writer:
                writer.write(rec)
            due = step % cfg.eval_interval_steps == 0 or step == cfg.max_steps
            if not due:
                continue
            metric = float(validate(trainer.model, val))
            evals.append((step, metric))
            logger.info("step %d: val Recall@10 = %.4f", step, metric)
            if metric > best:
                best, best_step, bad = metric, step, 0
                best_state = trainer.model.state_dict()
            else:
                bad += 1
                if bad >= cfg.early_stop_patience:
                    reason = "early_stop"
                    break
    finally:
        if writer:
            writer.close()
    return TrainResult(best_state, log, reason, best, best_step, evals)


class _StepWriter:
    def __init__(self, path) -> None:
        self.fh = open(path, "w", newline="")
        self.w = csv.writer(self.fh, lineterminator="\n")
        self.w.writerow(STEP_COLUMNS)

    def write(self, r: StepRecord) -> None:
        self.w.writerow([r.step, repr(r.l_ntp), repr(r.l_map), repr(r.l_total), f"{r.wall_millis:.4f}", r.high_water_bytes])
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()


def write_step_log(log: Sequence[StepRecord], path: str | Path) -> None:
    w = _StepWriter(path)
    for r in log:
        w.write(r)
    w.close()


def read_step_log(path: str | Path) -> list[StepRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        StepRecord(int(r["step"]), float(r["l_ntp"]), float(r["l_map"]), float(r["l_total"]), float(r["wall_millis"]), int(r["high_water_bytes"]))
        for r in rows
    ]

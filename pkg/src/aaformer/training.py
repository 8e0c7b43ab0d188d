"""Training: warmup + step-decay schedule, Adam, PK batches, light augmentation."""
from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint
from .data import DatasetSpec, SyntheticDataset
from .model import AAformer, ConfigError, ModelConfig, init_params
from .objectives import ClassifierBank, LossBreakdown, add_classifier_bank, loss_total
from .tensor import ParameterStore

log = logging.getLogger(__name__)

METRIC_FIELDS = ("step", "lr", "loss_total", "loss_cls", "loss_tri")


class TrainingDiverged(FloatingPointError):
    def __init__(self, message: str, traces=None, dump_path: Path | None = None):
        super().__init__(message)
        self.traces = traces
        self.dump_path = dump_path


@dataclass
class WarmupStepSchedule:
    """Linear warmup from ``warmup_start`` to ``base_lr``, then x``gamma`` at each milestone epoch."""

    base_lr: float = 3.5e-4
    warmup_start: float = 3.5e-5
    warmup_epochs: float = 2.0
    milestones: tuple[float, ...] = (8.0, 14.0)
    gamma: float = 0.1

    def __call__(self, epoch: float) -> float:
        if epoch < self.warmup_epochs:
            return self.warmup_start + (self.base_lr - self.warmup_start) * epoch / self.warmup_epochs
        drops = sum(1 for m in self.milestones if epoch >= m)
        return self.base_lr * self.gamma ** drops


class Adam:
    def __init__(self, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: ParameterStore, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            with np.errstate(over="ignore", invalid="ignore"):
                m *= b1
                m += (1.0 - b1) * g
                v *= b2
                v += (1.0 - b2) * g * g
                new = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            if not (np.all(np.isfinite(v)) and np.all(np.isfinite(new))):
                raise T.NonFiniteError(f"Adam moments or update for {name} are not finite")
            p.data = new

    def state(self) -> dict:
        return {"t": self.t, "m": {k: a.copy() for k, a in self.m.items()},
                "v": {k: a.copy() for k, a in self.v.items()}}

    def load_state(self, state: dict) -> None:
        self.t = int(state["t"])
        self.m = {k: np.array(a) for k, a in state["m"].items()}
        self.v = {k: np.array(a) for k, a in state["v"].items()}


@dataclass
class TrainConfig:
    steps: int = 288
    steps_per_epoch: int = 12
    ids_per_batch: int = 8
    imgs_per_id: int = 4
    base_lr: float = 3.5e-4
    warmup_start_lr: float = 3.5e-5
    warmup_epochs: float = 2.0
    milestones: tuple[float, ...] = (8.0, 14.0)
    lr_gamma: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    augment: bool = True
    flip_prob: float = 0.5
    erase_prob: float = 0.5
    crop_pad: int = 2

    def __post_init__(self):
        self.milestones = tuple(float(m) for m in self.milestones)
        if self.ids_per_batch < 2 or self.imgs_per_id < 2:
            raise ConfigError("PK batches need >= 2 identities and >= 2 images per identity")
        if self.steps_per_epoch < 1:
            raise ConfigError("steps_per_epoch must be >= 1")

    def schedule(self) -> WarmupStepSchedule:
        return WarmupStepSchedule(self.base_lr, self.warmup_start_lr, self.warmup_epochs,
                                  self.milestones, self.lr_gamma)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["milestones"] = list(self.milestones)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


def augment_batch(images: np.ndarray, rng: np.random.Generator, cfg: TrainConfig) -> np.ndarray:
    """Flip, pad-and-crop shift and random erasing, all drawn from ``rng``."""
    out = images.copy()
    B, H, W, C = out.shape
    pad = cfg.crop_pad
    for b in range(B):
        img = out[b]
        if rng.random() < cfg.flip_prob:
            img = img[:, ::-1]
        if pad:
            padded = np.pad(img, ((pad, pad), (pad, pad), (0, 0)))
            y, x = rng.integers(0, 2 * pad + 1, size=2)
            img = padded[y:y + H, x:x + W]
        if rng.random() < cfg.erase_prob:
            eh = int(rng.integers(H // 8, H // 3 + 1))
            ew = int(rng.integers(W // 8, W // 3 + 1))
            y, x = rng.integers(0, H - eh + 1), rng.integers(0, W - ew + 1)
            img = img.copy()
            img[y:y + eh, x:x + ew] = rng.random((eh, ew, C))
        out[b] = img
    return out


def sample_pk_batch(by_identity: dict[int, np.ndarray], rng: np.random.Generator,
                    ids_per_batch: int, imgs_per_id: int) -> np.ndarray:
    ids = np.array(sorted(by_identity))
    if len(ids) < ids_per_batch:
        raise ConfigError(f"only {len(ids)} identities for {ids_per_batch} per batch")
    chosen = rng.choice(ids, size=ids_per_batch, replace=False)
    rows = []
    for i in chosen:
        pool = by_identity[int(i)]
        rows.append(rng.choice(pool, size=imgs_per_id, replace=len(pool) < imgs_per_id))
    return np.concatenate(rows)


@dataclass
class StepRecord:
    step: int
    lr: float
    loss_total: float
    loss_cls: float
    loss_tri: float

    def row(self) -> tuple:
        return (self.step, self.lr, self.loss_total, self.loss_cls, self.loss_tri)


@dataclass
class Trainer:
    """Owns parameters, optimizer, RNG stream and step counter; resumable from a checkpoint."""

    model_cfg: ModelConfig
    train_cfg: TrainConfig
    dataset: SyntheticDataset
    seed: int = 0
    dump_dir: Path | None = None
    history: list[StepRecord] = field(default_factory=list)

    def __post_init__(self):
        if self.model_cfg.num_classes != self.dataset.spec.num_identities:
            raise ConfigError(
                f"num_classes={self.model_cfg.num_classes} but dataset has "
                f"{self.dataset.spec.num_identities} training identities"
            )
        init_rng = np.random.default_rng([self.seed, 10])
        self.model = AAformer(self.model_cfg, init_params(self.model_cfg, init_rng))
        add_classifier_bank(self.model.params, self.model_cfg.num_parts + 1, self.model_cfg.embed_dim,
                            self.model_cfg.num_classes, init_rng)
        self.bank = ClassifierBank.from_store(self.model.params)
        self.optimizer = Adam((self.train_cfg.beta1, self.train_cfg.beta2), self.train_cfg.adam_eps)
        self.rng = np.random.default_rng([self.seed, 11])
        self.step = 0
        self.schedule = self.train_cfg.schedule()
        self._by_identity = self.dataset.by_identity()
        self.last_traces = None

    @property
    def params(self) -> ParameterStore:
        return self.model.params

    @property
    def epoch(self) -> float:
        return self.step / self.train_cfg.steps_per_epoch

    def compute_loss(self, images: np.ndarray, labels: np.ndarray) -> LossBreakdown:
        out = self.model.forward(images)
        self.last_traces = out.traces
        return loss_total(out.cls, out.part_tokens, labels, self.bank,
                          self.model_cfg.triplet_margin, self.model_cfg.label_smoothing)

    def train_step(self) -> StepRecord:
        cfg = self.train_cfg
        lr = self.schedule(self.epoch)
        rows = sample_pk_batch(self._by_identity, self.rng, cfg.ids_per_batch, cfg.imgs_per_id)
        images = self.dataset.train.images[rows]
        labels = self.dataset.train.labels[rows]
        if cfg.augment:
            images = augment_batch(images, self.rng, cfg)
        try:
            losses = self.compute_loss(images, labels)
        except T.NonFiniteError as exc:
            raise self._diverged(str(exc)) from exc
        total, lc, lt = losses.values()
        if not np.isfinite(total):
            raise self._diverged(f"loss is {total}")
        self.params.zero_grad()
        with np.errstate(over="ignore", invalid="ignore"):
            T.backward(losses.total, self.params)
        bad = [name for name, t in self.params.items() if not np.all(np.isfinite(t.grad))]
        if bad:
            raise self._diverged(f"non-finite gradient in {bad[0]}")
        try:
            self.optimizer.step(self.params, lr)
        except T.NonFiniteError as exc:
            raise self._diverged(str(exc)) from exc
        rec = StepRecord(self.step, lr, total, lc, lt)
        self.history.append(rec)
        self.step += 1
        return rec

    def run(self, steps: int | None = None, callback=None) -> list[StepRecord]:
        """Run until ``steps`` total optimizer steps (default: the configured count)."""
        target = self.train_cfg.steps if steps is None else steps
        records = []
        while self.step < target:
            rec = self.train_step()
            records.append(rec)
            if rec.step % 20 == 0:
                log.info("step %d lr %.3g loss %.4f (cls %.4f tri %.4f)", *rec.row())
            if callback is not None and callback(self, rec):
                break
        return records

    def _diverged(self, message: str) -> TrainingDiverged:
        path = None
        if self.dump_dir is not None and self.last_traces:
            path = Path(self.dump_dir) / f"diverged_step{self.step}.json"
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps(_trace_summary(self.last_traces[-1]), indent=1))
        log.error("training diverged at step %d: %s", self.step, message)
        return TrainingDiverged(f"step {self.step}: {message}", self.last_traces, path)

    def to_checkpoint(self, config: dict | None = None) -> Checkpoint:
        """Snapshot parameters, optimizer moments, RNG stream and counters."""
        config = config if config is not None else {
            "model": self.model_cfg.to_dict(), "train": self.train_cfg.to_dict(),
            "data": self.dataset.spec.to_dict(), "seed": self.seed,
        }
        return Checkpoint(
            config=config,
            tensors=self.params.state(),
            optimizer=self.optimizer.state(),
            rng_state=self.rng.bit_generator.state,
            step=self.step,
            epoch=self.epoch,
        )

    def restore(self, ck: Checkpoint) -> None:
        self.params.load_state(ck.tensors)
        self.optimizer.load_state(ck.optimizer)
        self.rng.bit_generator.state = ck.rng_state
        self.step = ck.step

    @classmethod
    def from_checkpoint(cls, ck: Checkpoint, dataset: SyntheticDataset | None = None, **model_overrides) -> "Trainer":
        model_cfg = ModelConfig.from_dict({**ck.config["model"], **model_overrides})
        train_cfg = TrainConfig.from_dict(ck.config["train"])
        if dataset is None:
            dataset = SyntheticDataset(DatasetSpec.from_dict(ck.config["data"]))
        trainer = cls(model_cfg, train_cfg, dataset, int(ck.config.get("seed", 0)))
        trainer.restore(ck)
        return trainer

    def train_descriptors(self) -> np.ndarray:
        return self.model.descriptors(self.dataset.train.images)


def _trace_summary(trace) -> dict:
    if trace is None:
        return {}
    return {
        "granularity_sets": list(trace.granularity_sets),
        "similarity_range": [[float(s.min()), float(s.max())] for s in trace.similarities],
        "plan_residual_max": [None if p is None else float(np.max(p.residual)) for p in trace.plans],
        "largest_share": [float(m.largest_share().max()) for m in trace.masks],
        "repairs": len(trace.repairs),
    }


def train(model_cfg: ModelConfig, dataset: SyntheticDataset, train_cfg: TrainConfig | None = None,
          seed: int = 0) -> Trainer:
    trainer = Trainer(model_cfg, train_cfg or TrainConfig(), dataset, seed)
    trainer.run()
    return trainer

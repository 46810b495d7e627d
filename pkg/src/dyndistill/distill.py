"""Dynamic distillation: supervised + consistency losses and the two-step trainer.

Step 1 trains the student on labeled base data with cross-entropy.  Step 2
adds the distillation term on unlabeled target data: the EMA teacher sees one
augmented view, its logits are sharpened by ``tau`` and detached, and the
student is trained to match them on a second view.  Per iteration the
student is updated first and the teacher follows via ``ema_update``.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import SgdState, Tensor
from .data import STRONG, WEAK, AugmentationSpec, LabeledDataset, UnlabeledView, augment_batch
from .errors import ConfigError
from .model import Network, StudentTeacherPair, ema_update, forward, init_network

PAIRINGS = ("w-s", "w-w", "s-w", "s-s")


@dataclass
class TrainConfig:
    lr: float = 0.01
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 32
    epochs_step1: int = 50
    epochs_step2: int = 30
    tau: float = 0.1
    m: float = 0.99
    lambda_ramp_epochs: int = 20
    lambda_per_iteration: bool = False  # ramp on fractional epochs instead of once per epoch
    augment_pairing: str = "w-s"
    transfer_only: bool = False
    no_base: bool = False
    one_step: bool = False
    hard_threshold: float | None = None
    separate_distill_head: bool = False
    augment_base: bool = True
    hidden_dims: tuple[int, ...] = (256, 128)
    embed_dim: int = 64
    weak: AugmentationSpec = WEAK
    strong: AugmentationSpec = STRONG
    seed: int = 0

    def __post_init__(self):
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        if isinstance(self.weak, dict):
            self.weak = AugmentationSpec(**self.weak)
        if isinstance(self.strong, dict):
            self.strong = AugmentationSpec(**self.strong)

    def validate(self) -> None:
        if not self.tau > 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if not 0.0 <= self.m <= 1.0:
            raise ConfigError(f"teacher momentum m must lie in [0, 1], got {self.m}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs_step1 < 0 or self.epochs_step2 < 0:
            raise ConfigError("epoch counts must be >= 0")
        if not 0 <= self.lambda_ramp_epochs <= max(self.epochs_step2, 0):
            raise ConfigError("lambda_ramp_epochs must lie in [0, epochs_step2]")
        if self.augment_pairing not in PAIRINGS:
            raise ConfigError(f"augment_pairing must be one of {PAIRINGS}")
        if self.transfer_only and self.no_base:
            raise ConfigError("transfer_only and no_base together disable both loss terms")
        if not self.lr > 0 or not 0.0 <= self.sgd_momentum < 1.0 or self.weight_decay < 0:
            raise ConfigError("invalid optimizer settings")
        if self.embed_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ConfigError("layer widths must be positive")

    def widths(self, input_dim: int) -> list[int]:
        return [int(input_dim), *self.hidden_dims, int(self.embed_dim)]

    def pairing_specs(self) -> tuple[AugmentationSpec, AugmentationSpec]:
        """(teacher view, student view) augmentation specs."""
        pick = {"w": self.weak, "s": self.strong}
        first, second = self.augment_pairing.split("-")
        return pick[first], pick[second]

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        for k in ("weak", "strong"):
            d[k]["scale_range"] = list(d[k]["scale_range"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class LossBreakdown:
    supervised: float
    distill: float
    lam: float
    total: float
    skip_count: int = 0


# ---------------------------------------------------------------------------
# losses


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def sharpen(logits, tau: float) -> Tensor:
    """softmax(logits / tau), detached."""
    if not tau > 0:
        raise ConfigError(f"sharpening temperature must be > 0, got {tau}")
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    return Tensor(ad.softmax_array(data / tau))


def supervised_loss(network: Network, x, y) -> Tensor:
    logits = forward(network, x)
    target = one_hot(y, logits.shape[-1])
    return ad.mean(ad.cross_entropy(target, ad.softmax(logits)))


def distill_loss(
    pair: StudentTeacherPair,
    x: np.ndarray,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> tuple[Tensor, int]:
    """Mean H(teacher target, student prediction) over an unlabeled batch.

    Returns the loss and the number of samples dropped by ``hard_threshold``.
    """
    teacher_spec, student_spec = cfg.pairing_specs()
    x_teacher = augment_batch(x, teacher_spec, rng)
    x_student = augment_batch(x, student_spec, rng)
    t_logits = pair.teacher_forward(x_teacher, pair.teacher.distill_projection())
    skipped = 0
    if cfg.hard_threshold is None:
        target = sharpen(t_logits, cfg.tau)
    else:
        probs = ad.softmax_array(t_logits.data)
        keep = probs.max(axis=1) >= cfg.hard_threshold
        skipped = int((~keep).sum())
        if not keep.any():
            return Tensor(0.0), skipped
        target = Tensor(one_hot(probs[keep].argmax(axis=1), probs.shape[1]))
        x_student = x_student[keep]
    s_logits = forward(pair.student, x_student, pair.student.distill_projection())
    return ad.mean(ad.cross_entropy(target, ad.softmax(s_logits))), skipped


def total_loss(
    pair: StudentTeacherPair,
    labeled_batch: tuple[np.ndarray, np.ndarray] | None,
    unlabeled_batch: np.ndarray | None,
    lam: float,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> tuple[Tensor, LossBreakdown]:
    """supervised + lam * distill, honouring ``no_base``."""
    if lam < 0:
        raise ConfigError("lambda must be >= 0")
    use_sup = not cfg.no_base
    use_dist = unlabeled_batch is not None
    if not use_sup and not use_dist:
        raise ConfigError("both loss terms are disabled")
    parts = []
    sup_val = dist_val = 0.0
    skipped = 0
    if use_sup:
        if labeled_batch is None:
            raise ConfigError("supervised term enabled but no labeled batch given")
        sup = supervised_loss(pair.student, *labeled_batch)
        sup_val = sup.item()
        parts.append(sup)
    if use_dist:
        dist, skipped = distill_loss(pair, unlabeled_batch, cfg, rng)
        dist_val = dist.item()
        parts.append(ad.scale(dist, lam))
    total = parts[0] if len(parts) == 1 else ad.add(parts[0], parts[1])
    return total, LossBreakdown(sup_val, dist_val, float(lam), total.item(), skipped)


# ---------------------------------------------------------------------------
# schedules


def lambda_schedule(epoch: float, ramp_epochs: float) -> float:
    """Cosine ramp from 0 to 1 over ``ramp_epochs``, then constant 1."""
    if ramp_epochs <= 0:
        return 1.0
    t = min(max(epoch, 0.0) / ramp_epochs, 1.0)
    return 0.5 * (1.0 - math.cos(math.pi * t))


def cosine_lr(epoch: float, base_lr: float, total_epochs: float) -> float:
    if total_epochs <= 0:
        return base_lr
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))


# ---------------------------------------------------------------------------
# batching


def _rng(seed, stream: int) -> np.random.Generator:
    return np.random.default_rng([*np.atleast_1d(seed).tolist(), stream])


def epoch_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(n)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


class CyclingSampler:
    """Endless shuffled stream over ``n`` indices; reshuffles on each pass."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self.rng = rng
        self._perm = rng.permutation(n)
        self._pos = 0
        self.passes = 0

    def next(self, size: int) -> np.ndarray:
        out = []
        while size > 0:
            if self._pos >= self.n:
                self._perm = self.rng.permutation(self.n)
                self._pos = 0
                self.passes += 1
            take = self._perm[self._pos : self._pos + size]
            self._pos += take.size
            size -= take.size
            out.append(take)
        return np.concatenate(out)


def _labeled_batch(base: LabeledDataset, idx, cfg: TrainConfig, rng) -> tuple[np.ndarray, np.ndarray]:
    x = base.samples[idx]
    if cfg.augment_base:
        x = augment_batch(x, cfg.weak, rng)
    return x, base.labels[idx]


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainLog:
    epochs: list[dict] = field(default_factory=list)
    iterations: list[LossBreakdown] = field(default_factory=list)

    def column(self, key: str) -> list:
        return [e[key] for e in self.epochs]


def _epoch_record(phase: str, epoch: int, lr: float, lam: float, rows: Sequence[LossBreakdown]) -> dict:
    n = max(len(rows), 1)
    return {
        "phase": phase,
        "epoch": epoch,
        "lr": lr,
        "lambda": lam,
        "supervised": sum(r.supervised for r in rows) / n,
        "distill": sum(r.distill for r in rows) / n,
        "total": sum(r.total for r in rows) / n,
        "skip_count": sum(r.skip_count for r in rows),
        "iterations": len(rows),
    }


def train_base(
    network: Network,
    base: LabeledDataset,
    cfg: TrainConfig,
    *,
    epochs: int | None = None,
    seed=None,
    on_epoch_end: Callable[[dict], None] | None = None,
) -> tuple[Network, TrainLog]:
    """Supervised-only training with SGD and a cosine learning-rate schedule."""
    cfg.validate()
    epochs = cfg.epochs_step1 if epochs is None else epochs
    seed = (cfg.seed, 1) if seed is None else seed
    rng = _rng(seed, 0)
    params = network.parameters()
    opt = SgdState(params, cfg.lr, cfg.sgd_momentum, cfg.weight_decay)
    log = TrainLog()
    for epoch in range(epochs):
        lr = cosine_lr(epoch, cfg.lr, epochs)
        rows = []
        for idx in epoch_batches(len(base), cfg.batch_size, rng):
            x, y = _labeled_batch(base, idx, cfg, rng)
            ad.zero_grad(params)
            loss = supervised_loss(network, x, y)
            ad.backward(loss)
            ad.sgd_step(opt, lr)
            val = loss.item()
            rows.append(LossBreakdown(val, 0.0, 0.0, val))
        log.iterations.extend(rows)
        rec = _epoch_record("step1", epoch, lr, 0.0, rows)
        log.epochs.append(rec)
        if on_epoch_end:
            on_epoch_end(rec)
    return network, log


def train_joint(
    pair: StudentTeacherPair,
    base: LabeledDataset,
    unlabeled: UnlabeledView,
    cfg: TrainConfig,
    *,
    epochs: int | None = None,
    seed=None,
    on_epoch_end: Callable[[dict], None] | None = None,
) -> tuple[StudentTeacherPair, TrainLog]:
    """Joint step: supervised + lambda * distillation, then EMA teacher update.

    An epoch is one pass over the labeled stream; the unlabeled stream cycles.
    Under ``no_base`` an epoch is one pass over the unlabeled stream instead.
    """
    if not isinstance(unlabeled, UnlabeledView):
        raise TypeError("train_joint takes the label-free UnlabeledView (use UnlabeledDataset.view())")
    cfg.validate()
    epochs = cfg.epochs_step2 if epochs is None else epochs
    seed = (cfg.seed, 2) if seed is None else seed
    lab_rng, unl_rng, aug_rng = _rng(seed, 0), _rng(seed, 1), _rng(seed, 2)
    unl_stream = CyclingSampler(len(unlabeled), unl_rng)
    params = pair.student.parameters()
    opt = SgdState(params, cfg.lr, cfg.sgd_momentum, cfg.weight_decay)
    log = TrainLog()
    for epoch in range(epochs):
        lr = cosine_lr(epoch, cfg.lr, epochs)
        epoch_lam = lam = 0.0 if cfg.transfer_only else lambda_schedule(epoch, cfg.lambda_ramp_epochs)
        rows = []
        if cfg.no_base:
            steps = [(None, b) for b in epoch_batches(len(unlabeled), cfg.batch_size, unl_rng)]
        else:
            steps = [(b, None) for b in epoch_batches(len(base), cfg.batch_size, lab_rng)]
        for i, (lab_idx, unl_idx) in enumerate(steps):
            if cfg.lambda_per_iteration and not cfg.transfer_only:
                lam = lambda_schedule(epoch + i / len(steps), cfg.lambda_ramp_epochs)
            labeled = _labeled_batch(base, lab_idx, cfg, lab_rng) if lab_idx is not None else None
            unl_batch = None
            if not cfg.transfer_only:
                if unl_idx is None:
                    unl_idx = unl_stream.next(cfg.batch_size)
                unl_batch = unlabeled.samples[unl_idx]
            ad.zero_grad(params)
            total, parts = total_loss(pair, labeled, unl_batch, lam, cfg, aug_rng)
            if total.requires_grad:
                ad.backward(total)
            ad.sgd_step(opt, lr)
            ema_update(pair)
            rows.append(parts)
        log.iterations.extend(rows)
        rec = _epoch_record("step2", epoch, lr, epoch_lam, rows)
        log.epochs.append(rec)
        if on_epoch_end:
            on_epoch_end(rec)
    return pair, log


@dataclass
class PretrainResult:
    pair: StudentTeacherPair
    step1_state: dict | None
    step1_log: TrainLog
    step2_log: TrainLog


def pretrain(
    base: LabeledDataset,
    unlabeled: UnlabeledView,
    cfg: TrainConfig,
    on_epoch_end: Callable[[dict], None] | None = None,
) -> PretrainResult:
    """The full two-step schedule (step 1 skipped under ``one_step``)."""
    cfg.validate()
    student = init_network(cfg.seed, cfg.widths(base.input_dim), base.n_classes, cfg.separate_distill_head)
    step1_log = TrainLog()
    step1_state = None
    if not cfg.one_step:
        student, step1_log = train_base(student, base, cfg, on_epoch_end=on_epoch_end)
        step1_state = {name: p.data.copy() for name, p in student.named_parameters("student")}
    pair = StudentTeacherPair.from_student(student, cfg.m)
    pair, step2_log = train_joint(pair, base, unlabeled, cfg, on_epoch_end=on_epoch_end)
    return PretrainResult(pair, step1_state, step1_log, step2_log)

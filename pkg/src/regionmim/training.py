"""AdamW optimization, self-supervised pretraining, fine-tuning, evaluation.

The loops are sequential and deterministic: epoch shuffles, per-sample mask
seeds, and stratified subsets are all derived from the run seed through
``numpy.random.SeedSequence``, so identical (data, config, seed) reproduce
identical metrics and parameters bit for bit. Pretraining consumes
(image, organ mask) pairs only; labels never enter that path.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, backward, no_grad, zero_grads
from .errors import ShapeError, StratificationError, StrategyError, TrainingError
from .model import (ClassifierHead, DecoderConfig, DecoderParams, EncoderConfig,
                    EncoderParams, classifier_forward, init_parameters, pretrain_loss)
from .patching import (ImageGrid, MaskImage, REGION, build_masking_plan,
                       compute_valid_set, split_into_patches)

REFERENCE_BATCH = 256  # batch size the base learning rate is quoted at


@dataclass(frozen=True)
class RunConfig:
    """Hyperparameters for one training phase."""

    epochs: int = 40
    batch_size: int = 256
    base_lr: float = 1.5e-4
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-8
    mask_ratio: float = 0.75
    mask_strategy: str = REGION
    overlap_threshold: float = 0.0
    schedule: str = "constant"  # constant | cosine
    warmup_epochs: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ShapeError("epochs and batch_size must be at least 1")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ShapeError(f"mask ratio {self.mask_ratio} outside (0, 1)")
        if self.schedule not in ("constant", "cosine"):
            raise ShapeError(f"unknown schedule {self.schedule!r}")

    @property
    def scaled_lr(self) -> float:
        return self.base_lr * (self.batch_size / REFERENCE_BATCH)


@dataclass
class EpochMetrics:
    epoch: int
    split: str
    loss: float
    accuracy: float | None
    seconds: float
    clamped_plans: int


@dataclass
class MetricsRecord:
    rows: list[EpochMetrics] = field(default_factory=list)

    def final_loss(self) -> float:
        return self.rows[-1].loss

    def losses(self) -> list[float]:
        return [r.loss for r in self.rows]


def write_metrics_csv(path, record: MetricsRecord) -> None:
    """Line-oriented metrics CSV: epoch, split, loss, accuracy, seconds, clamped_plans.

    The seconds column is written as 0.000 so run outputs stay byte-identical
    across reruns; measured wall-clock lives in the in-memory record and the
    stderr log only.
    """
    lines = ["epoch,split,loss,accuracy,seconds,clamped_plans"]
    for r in record.rows:
        acc = "" if r.accuracy is None else f"{r.accuracy:.6f}"
        lines.append(f"{r.epoch},{r.split},{r.loss:.12g},{acc},0.000,{r.clamped_plans}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def epoch_lr(run: RunConfig, epoch: int) -> float:
    """Learning rate for one epoch under the configured schedule."""
    lr = run.scaled_lr
    if run.warmup_epochs > 0 and epoch < run.warmup_epochs:
        return lr * (epoch + 1) / run.warmup_epochs
    if run.schedule == "constant":
        return lr
    span = max(run.epochs - run.warmup_epochs, 1)
    progress = (epoch - run.warmup_epochs) / span
    return lr * 0.5 * (1.0 + np.cos(np.pi * progress))


class AdamW:
    """Adam with decoupled weight decay applied directly to the parameters."""

    def __init__(self, named_params, run: RunConfig):
        self.params = list(named_params)
        self.run = run
        self.step_count = 0
        self.first_moment = {name: np.zeros_like(p.data) for name, p in self.params}
        self.second_moment = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self, lr: float) -> None:
        """One update; parameters with no gradient this step are only decayed."""
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.run.beta1, self.run.beta2
        eps, decay = self.run.adam_eps, self.run.weight_decay
        for name, p in self.params:
            grad = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.isfinite(grad).all():
                raise TrainingError(f"non-finite gradient for parameter {name!r}")
            m = self.first_moment[name]
            v = self.second_moment[name]
            m *= b1
            m += (1.0 - b1) * grad
            v *= b2
            v += (1.0 - b2) * grad * grad
            m_hat = m / (1.0 - b1 ** t)
            v_hat = v / (1.0 - b2 ** t)
            p.data -= lr * (m_hat / (np.sqrt(v_hat) + eps) + decay * p.data)

    def zero_grads(self) -> None:
        zero_grads(p for _, p in self.params)

    def state_arrays(self):
        """Moment arrays keyed for checkpointing."""
        arrays = {}
        for name, _ in self.params:
            arrays[f"m.{name}"] = self.first_moment[name]
            arrays[f"v.{name}"] = self.second_moment[name]
        return self.step_count, arrays


def adamw_step(optimizer: AdamW, lr: float | None = None) -> None:
    """Apply one AdamW update at the given (or run-scaled) learning rate."""
    optimizer.step(optimizer.run.scaled_lr if lr is None else lr)


def _sample_seed(run_seed: int, epoch: int, sample_index: int, stream: int) -> int:
    ss = np.random.SeedSequence([int(run_seed), int(stream), int(epoch), int(sample_index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _epoch_order(run_seed: int, epoch: int, count: int, stream: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([int(run_seed), int(stream), int(epoch)]))
    return rng.permutation(count)


def _batches(order: np.ndarray, batch_size: int):
    for start in range(0, order.size, batch_size):
        yield order[start:start + batch_size]


def _mean_loss(losses: list[Tensor]) -> Tensor:
    total = losses[0]
    for item in losses[1:]:
        total = total + item
    return total * (1.0 / len(losses))


def pretrain(samples, encoder_cfg: EncoderConfig, decoder_cfg: DecoderConfig,
             run: RunConfig, log=None):
    """Masked-patch reconstruction pretraining over (ImageGrid, MaskImage) pairs.

    Every epoch reshuffles the samples and draws a fresh masking plan per
    sample (per-epoch sub-seeds), so the masked sets vary across epochs.
    Returns (encoder, decoder, metrics).
    """
    samples = list(samples)
    if not samples:
        raise ShapeError("pretraining needs a nonempty dataset")
    encoder, decoder, _ = init_parameters(encoder_cfg, decoder_cfg, classes=1, seed=run.seed)

    prepared = []
    for i, (img, mask) in enumerate(samples):
        pg = split_into_patches(img, encoder_cfg.patch_size)
        valid = compute_valid_set(mask, encoder_cfg.patch_size, run.overlap_threshold)
        if run.mask_strategy == REGION and valid.size == 0:
            raise StrategyError(f"sample {i} has no patches overlapping its organ mask")
        prepared.append((pg, valid))

    named = list(encoder.named_parameters()) + list(decoder.named_parameters())
    optimizer = AdamW(named, run)
    metrics = MetricsRecord()

    for epoch in range(run.epochs):
        started = time.monotonic()
        lr = epoch_lr(run, epoch)
        order = _epoch_order(run.seed, epoch, len(prepared), stream=1)
        epoch_losses = []
        clamped = 0
        for batch in _batches(order, run.batch_size):
            optimizer.zero_grads()
            losses = []
            for sample_index in batch:
                pg, valid = prepared[sample_index]
                plan = build_masking_plan(
                    pg.count, valid, run.mask_ratio, run.mask_strategy,
                    _sample_seed(run.seed, epoch, int(sample_index), stream=2))
                clamped += int(plan.clamped)
                losses.append(pretrain_loss(pg, plan, encoder, decoder))
            batch_loss = _mean_loss(losses)
            backward(batch_loss)
            optimizer.step(lr)
            epoch_losses.extend(float(l) for l in losses)
        row = EpochMetrics(epoch, "pretrain", float(np.mean(epoch_losses)), None,
                           time.monotonic() - started, clamped)
        metrics.rows.append(row)
        if log:
            log(f"epoch {epoch}: pretrain loss {row.loss:.6f} "
                f"({row.seconds:.2f}s, {clamped} clamped plans)")
    return encoder, decoder, metrics


def stratified_subset(labels, fraction: float, seed: int) -> np.ndarray:
    """Per-class subset indices at the given fraction (ceil per class), seeded."""
    if not 0.0 < fraction <= 1.0:
        raise ShapeError(f"label fraction {fraction} outside (0, 1]")
    labels = np.asarray(labels, dtype=np.int64)
    chosen = []
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        keep = int(np.ceil(fraction * members.size))
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 3, int(cls)]))
        chosen.append(np.sort(rng.permutation(members)[:keep]))
    return np.concatenate(chosen)


def finetune(samples, encoder: EncoderParams, run: RunConfig, classes: int,
             label_fraction: float = 1.0, freeze_encoder: bool = False, log=None):
    """Supervised training of the encoder plus a fresh linear head.

    `samples` is a list of (ImageGrid, label) pairs. A per-class stratified
    subset of the requested fraction is trained with cross entropy; the
    decoder plays no part. Returns (encoder, head, metrics).
    """
    samples = list(samples)
    if not samples:
        raise ShapeError("fine-tuning needs a nonempty dataset")
    labels = [int(lbl) for _, lbl in samples]
    subset = stratified_subset(labels, label_fraction, run.seed)
    present = {labels[i] for i in subset}
    missing = sorted(set(range(classes)) - present)
    if missing:
        raise StratificationError(
            f"classes {missing} absent from the {label_fraction:g} stratified subset")

    head_rng = np.random.default_rng(np.random.SeedSequence([run.seed, 4]))
    d = encoder.config.latent_dim
    head = ClassifierHead(
        weight=Tensor(np.clip(head_rng.normal(0.0, 0.02, (d, classes)), -0.04, 0.04),
                      requires_grad=True),
        bias=Tensor(np.zeros(classes), requires_grad=True),
        classes=classes,
    )

    named = list(head.named_parameters())
    if not freeze_encoder:
        named = list(encoder.named_parameters()) + named
    optimizer = AdamW(named, run)
    metrics = MetricsRecord()

    for epoch in range(run.epochs):
        started = time.monotonic()
        lr = epoch_lr(run, epoch)
        order = _epoch_order(run.seed, epoch, subset.size, stream=5)
        epoch_losses, hits, seen = [], 0, 0
        for batch in _batches(order, run.batch_size):
            optimizer.zero_grads()
            rows, batch_labels = [], []
            for pos in batch:
                img, lbl = samples[subset[pos]]
                logits = classifier_forward(img, encoder, head)
                rows.append(logits.reshape(1, classes))
                batch_labels.append(lbl)
                hits += int(int(np.argmax(logits.data)) == lbl)
                seen += 1
            loss = ad.cross_entropy(ad.concat_rows(rows), batch_labels)
            backward(loss)
            optimizer.step(lr)
            epoch_losses.append(float(loss))
        row = EpochMetrics(epoch, "train", float(np.mean(epoch_losses)),
                           hits / seen, time.monotonic() - started, 0)
        metrics.rows.append(row)
        if log:
            log(f"epoch {epoch}: train loss {row.loss:.6f} "
                f"accuracy {row.accuracy:.4f} ({row.seconds:.2f}s)")
    return encoder, head, metrics


def evaluate(samples, encoder: EncoderParams, head: ClassifierHead):
    """Top-1 accuracy and confusion counts; ties go to the lowest class index."""
    confusion = np.zeros((head.classes, head.classes), dtype=np.int64)
    hits = 0
    with no_grad():
        for img, lbl in samples:
            logits = classifier_forward(img, encoder, head)
            predicted = int(np.argmax(logits.data))  # argmax takes the first maximum
            confusion[int(lbl), predicted] += 1
            hits += int(predicted == int(lbl))
    return hits / max(len(samples), 1), confusion


def sweep_masking_ratio(pretrain_samples, train_samples, test_samples,
                        encoder_cfg: EncoderConfig, decoder_cfg: DecoderConfig,
                        pretrain_run: RunConfig, finetune_run: RunConfig,
                        classes: int, ratios, strategies,
                        label_fraction: float = 1.0, log=None):
    """Pretrain/finetune/evaluate over every (strategy, ratio) pair.

    Seeds are shared across cells so rows differ only in the masking setup.
    Returns a list of (strategy, sigma, accuracy) rows in grid order.
    """
    rows = []
    for strategy in strategies:
        for ratio in ratios:
            cell_pre = replace(pretrain_run, mask_ratio=float(ratio), mask_strategy=strategy)
            encoder, _, _ = pretrain(pretrain_samples, encoder_cfg, decoder_cfg,
                                     cell_pre, log=None)
            encoder, head, _ = finetune(train_samples, encoder, finetune_run, classes,
                                        label_fraction=label_fraction)
            accuracy, _ = evaluate(test_samples, encoder, head)
            rows.append((strategy, float(ratio), accuracy))
            if log:
                log(f"sweep {strategy} sigma={ratio:g}: accuracy {accuracy:.4f}")
    return rows


def write_sweep_csv(path, rows) -> None:
    lines = ["strategy,sigma,accuracy"]
    for strategy, sigma, accuracy in rows:
        lines.append(f"{strategy},{sigma:g},{accuracy:.6f}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")

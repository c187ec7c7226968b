# plainmask - Plain Mask Transformer
# Copyright © 2026 PlainMask Developers
#
# This file is part of the PlainMask project and distributed under the
# terms of a 3-clause BSD license. See the LICENSE file in that project
# for the detailed conditions.

import contextvars
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, TextIO, Tuple

import numpy as np
from dataclasses_json import dataclass_json

from .config import ConfigurationError
from .container import load_checkpoint, load_encoder, save_checkpoint
from .data import Clip, Sample, Split, SyntheticDataset, dominant_class, downsample_targets
from .decoder import DecoderOutput
from .encoder import VisionTransformer
from .layers import Linear
from .losses import LossBreakdown, segmentation_loss
from .matching import hungarian_match, match_cost, video_match
from .metrics import (
    AssociationAccumulator,
    PanopticAccumulator,
    PanopticMap,
    ScoredMask,
    SemanticAccumulator,
    instance_inference,
    mask_ap,
    mask_probabilities,
    panoptic_inference,
    semantic_inference,
    video_panoptic_quality,
)
from .model import RunConfig, ScheduleConfig, Variant
from .numerics import Tape, Tensor, cross_entropy, default_dtype
from .optim import AdamW, learning_rate
from .segmenter import PlainMaskTransformer


class NonFiniteLossError(Exception):
    """Error thrown when the training loss stops being finite."""

    step: int

    def __init__(self, step: int, msg: str):
        super().__init__(msg)
        self.step = step


@dataclass_json
@dataclass
class TrainRecord:
    """One line of the metric log, written during training."""

    step: int
    lr: float
    loss: float
    class_loss: float
    bce_loss: float
    dice_loss: float
    mask_draws: List[int] = field(default_factory=list)
    seconds: float = 0.0


@dataclass_json
@dataclass
class EvalRecord:
    """One line of the metric log, written after a periodic evaluation."""

    step: int
    split: str
    metrics: Dict[str, Optional[float]] = field(default_factory=dict)


def eval_threads() -> int:
    """Gets the evaluation parallelism from ``PMT_THREADS`` (default 1)."""
    value = os.environ.get("PMT_THREADS", "1")
    try:
        n = int(value)
    except ValueError:
        raise ConfigurationError(f"PMT_THREADS must be an integer, got {value!r}")
    if n < 1:
        raise ConfigurationError(f"PMT_THREADS must be at least 1, got {n}")
    return n


def as_tensor(pixels: np.ndarray) -> Tensor:
    return Tensor(pixels, dtype=default_dtype())


# Losses of one sample


def image_loss(
    model: PlainMaskTransformer,
    sample: Sample,
    cfg: RunConfig,
    step: int,
    mask_draws: Optional[Sequence[bool]],
) -> LossBreakdown:
    """Loss of one image, supervising every prediction set with the final
    prediction's matching."""
    out = model(as_tensor(sample.image), True, step, mask_draws=mask_draws)
    targets = downsample_targets(sample.panoptic)
    cost = match_cost(out.final, targets.classes, targets.masks, cfg.loss)
    match = hungarian_match(cost)
    return segmentation_loss(
        out.predictions, targets.classes, targets.masks, match, cfg.loss, cfg.model.num_classes
    )


def clip_loss(
    model: PlainMaskTransformer,
    clip: Clip,
    cfg: RunConfig,
    step: int,
    mask_draws: Optional[Sequence[bool]],
) -> LossBreakdown:
    """Mean loss over the frames of a clip, with persistent matching."""
    frames = [as_tensor(f) for f in clip.frames]
    outs = model.forward_clip(frames, True, step, mask_draws=mask_draws)
    persistent: Dict[int, int] = {}
    total = None
    out = LossBreakdown(total=Tensor(0.0))
    for pred, pmap in zip(outs, clip.panoptic):
        targets = downsample_targets(pmap)
        cost = match_cost(pred.final, targets.classes, targets.masks, cfg.loss)
        match = video_match(cost, [int(i) for i in targets.ids], persistent)
        frame = segmentation_loss(
            pred.predictions,
            targets.classes,
            targets.masks,
            match,
            cfg.loss,
            cfg.model.num_classes,
        )
        total = frame.total if total is None else total + frame.total
        out.class_loss += frame.class_loss / len(outs)
        out.bce_loss += frame.bce_loss / len(outs)
        out.dice_loss += frame.dice_loss / len(outs)
        out.num_sets = frame.num_sets
    assert total is not None
    out.total = total * (1.0 / len(outs))
    return out


# Evaluation


@dataclass
class EvalShard:
    panoptic: PanopticAccumulator
    semantic: SemanticAccumulator
    instances: List[List[ScoredMask]] = field(default_factory=list)
    gt_instances: List[List[Tuple[int, np.ndarray]]] = field(default_factory=list)
    pred_clips: List[List[PanopticMap]] = field(default_factory=list)
    gt_clips: List[List[PanopticMap]] = field(default_factory=list)
    association: AssociationAccumulator = field(default_factory=AssociationAccumulator)


def _evaluate_shard(
    model: PlainMaskTransformer,
    dataset: SyntheticDataset,
    indices: Sequence[int],
    cfg: RunConfig,
) -> EvalShard:
    m = cfg.model
    shard = EvalShard(
        PanopticAccumulator(m.num_classes, m.thing_classes),
        SemanticAccumulator(m.num_classes),
    )
    size = m.image_size
    for i in indices:
        sample = dataset[i]
        if isinstance(sample, Clip):
            outs = model.forward_clip([as_tensor(f) for f in sample.frames])
            preds = [
                panoptic_inference(o.final, cfg.postprocess, m.thing_classes, size, query_ids=True)
                for o in outs
            ]
            shard.pred_clips.append(preds)
            shard.gt_clips.append(sample.panoptic)
            shard.association.add_clip(
                [_slot_masks(o, size, cfg.postprocess.mask_threshold) for o in outs],
                sample.panoptic,
            )
            continue
        out = model(as_tensor(sample.image))
        pred = panoptic_inference(out.final, cfg.postprocess, m.thing_classes, size)
        shard.panoptic.add(pred, sample.panoptic)
        shard.semantic.add(semantic_inference(out.final, size), sample.panoptic.semantic())
        shard.instances.append(
            instance_inference(out.final, m.thing_classes, size, cfg.postprocess.mask_threshold)
        )
        _, classes, masks = sample.panoptic.masks()
        things = set(m.thing_classes)
        shard.gt_instances.append(
            [(int(c), mk) for c, mk in zip(classes, masks) if int(c) in things]
        )
    return shard


def _slot_masks(out: DecoderOutput, size: Sequence[int], threshold: float) -> np.ndarray:
    return mask_probabilities(out.final, size) >= threshold


def _merge(a: EvalShard, b: EvalShard) -> EvalShard:
    return EvalShard(
        a.panoptic.merge(b.panoptic),
        a.semantic.merge(b.semantic),
        a.instances + b.instances,
        a.gt_instances + b.gt_instances,
        a.pred_clips + b.pred_clips,
        a.gt_clips + b.gt_clips,
        a.association.merge(b.association),
    )


def evaluate(
    model: PlainMaskTransformer,
    dataset: SyntheticDataset,
    cfg: RunConfig,
    limit: Optional[int] = None,
    threads: int = 1,
) -> Dict[str, Optional[float]]:
    """Evaluates a model on (the first ``limit`` samples of) a dataset.

    Samples are cut into contiguous shards evaluated concurrently; the
    shard results are merged in shard order.

    :returns: PQ, SQ, RQ, PQ_th, PQ_st, mIoU, AP, AP50 and AP75 for
        images; VPQ, its per-window values and the association accuracy
        for clips.
    """
    n = len(dataset) if limit is None else min(limit, len(dataset))
    threads = max(1, min(threads, n)) if n > 0 else 1
    bounds = np.linspace(0, n, threads + 1).astype(int)
    shards = [list(range(bounds[i], bounds[i + 1])) for i in range(threads)]
    # workers run in copies of the caller's context, so precision() applies
    contexts = [contextvars.copy_context() for _ in shards]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        jobs = [
            pool.submit(ctx.run, _evaluate_shard, model, dataset, s, cfg)
            for ctx, s in zip(contexts, shards)
        ]
        results = [j.result() for j in jobs]
    merged = results[0]
    for r in results[1:]:
        merged = _merge(merged, r)

    m = cfg.model
    if dataset.video:
        vpq = video_panoptic_quality(
            merged.pred_clips, merged.gt_clips, m.num_classes, m.thing_classes
        )
        report: Dict[str, Optional[float]] = {"VPQ": vpq.vpq}
        for k, v in vpq.per_window.items():
            report[f"VPQ_k{k}"] = v
        report["association"] = merged.association.result()
        return report
    pq = merged.panoptic.result()
    iou = merged.semantic.result()
    ap = mask_ap(merged.instances, merged.gt_instances, m.thing_classes)
    return {
        "PQ": pq.pq,
        "SQ": pq.sq,
        "RQ": pq.rq,
        "PQ_th": pq.pq_things,
        "PQ_st": pq.pq_stuff,
        "mIoU": iou.miou,
        "AP": ap.ap,
        "AP50": ap.ap50,
        "AP75": ap.ap75,
    }


# Training


class Trainer(object):
    """Seeded, resumable segmentation training.

    All randomness after initialisation (batch composition and masking
    draws) comes from one generator that is saved in checkpoints, so
    that resuming is equivalent to never stopping.
    """

    def __init__(
        self,
        cfg: RunConfig,
        variant: Variant = "pmt",
        video: bool = False,
        encoder_path: Optional[str] = None,
    ):
        self.cfg = cfg
        self.video = video
        self.model = PlainMaskTransformer(
            cfg.model, variant, seed=cfg.seed, total_steps=cfg.schedule.total_steps
        )
        if encoder_path is not None:
            if not os.path.exists(encoder_path):
                raise ConfigurationError(f"Encoder checkpoint {encoder_path} does not exist")
            load_encoder(encoder_path, self.model.encoder)
            logging.info(f"Loaded encoder from {encoder_path}")
        s = cfg.schedule
        self.optimizer = AdamW(
            self.model.trainable_parameters(), s.betas, s.eps, s.weight_decay
        )
        self.rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
        self.step = 0
        self.train_set = SyntheticDataset(cfg.data, Split.TRAIN, video)
        self.val_set = SyntheticDataset(cfg.data, Split.VAL, video)

    @property
    def batch_size(self) -> int:
        s = self.cfg.schedule
        return s.clips_per_batch if self.video else s.batch_size

    def train_step(self) -> TrainRecord:
        """Runs one optimiser step.

        :raises NonFiniteLossError: If the loss is NaN or infinite.
        """
        start = time.perf_counter()
        step = self.step
        draws = self.model.schedule.draw(step, self.rng)
        indices = self.rng.integers(0, len(self.train_set), size=self.batch_size)
        weight = 1.0 / len(indices)
        terms = np.zeros(3)
        with Tape() as tape:
            total = None
            for i in indices:
                sample = self.train_set[int(i)]
                if self.video:
                    part = clip_loss(self.model, sample, self.cfg, step, draws)
                else:
                    part = image_loss(self.model, sample, self.cfg, step, draws)
                terms += [part.class_loss, part.bce_loss, part.dice_loss]
                total = part.total if total is None else total + part.total
            assert total is not None
            loss = total * weight
        value = float(loss.data)
        if not np.isfinite(value):
            culprit = tape.first_nonfinite() or "loss"
            raise NonFiniteLossError(step, f"Non-finite loss at step {step} (first in {culprit})")
        tape.backward(loss)
        lr = learning_rate(step, self.cfg.schedule, self.video)
        self.optimizer.step(lr)
        self.optimizer.zero_grad()
        self.step += 1
        terms *= weight
        return TrainRecord(
            step=step,
            lr=lr,
            loss=value,
            class_loss=float(terms[0]),
            bce_loss=float(terms[1]),
            dice_loss=float(terms[2]),
            mask_draws=[int(d) for d in draws],
            seconds=time.perf_counter() - start,
        )

    def evaluate(self, limit: Optional[int] = None, threads: int = 1) -> Dict[str, Optional[float]]:
        return evaluate(self.model, self.val_set, self.cfg, limit, threads)

    def save(self, path: str) -> None:
        save_checkpoint(path, self.model, self.optimizer, self.step, self.rng)

    def resume(self, path: str) -> None:
        """Restores a checkpoint written by ``save``."""
        step, rng = load_checkpoint(path, self.model, self.optimizer)
        if rng is not None:
            self.rng = rng
        self.step = step
        logging.info(f"Resumed training at step {step}")


def train_loop(
    trainer: Trainer,
    log: Optional[TextIO] = None,
    stop_at: Optional[int] = None,
    threads: int = 1,
) -> Trainer:
    """Trains until the end of the schedule (or until ``stop_at``).

    :param log: Receives one JSON record per logged step and per
        periodic evaluation.
    :param stop_at: Step at which to stop early, e.g. to checkpoint.
    """
    s = trainer.cfg.schedule
    end = s.total_steps if stop_at is None else min(stop_at, s.total_steps)
    first_loss: Optional[float] = None
    while trainer.step < end:
        record = trainer.train_step()
        if first_loss is None:
            first_loss = record.loss
        if log is not None and (record.step % max(1, s.log_every) == 0 or trainer.step == end):
            log.write(record.to_json() + "\n")
        if record.step % max(1, s.log_every) == 0:
            logging.info(
                f"step {record.step}: loss {record.loss:.4f} "
                f"(cls {record.class_loss:.3f}, bce {record.bce_loss:.3f}, "
                f"dice {record.dice_loss:.3f}), lr {record.lr:.2e}"
            )
        if s.eval_every > 0 and trainer.step % s.eval_every == 0:
            metrics = trainer.evaluate(s.eval_samples, threads)
            logging.info(f"step {trainer.step}: {metrics}")
            if log is not None:
                log.write(EvalRecord(trainer.step, Split.VAL.value, metrics).to_json() + "\n")
    return trainer


# Encoder pretext


@dataclass
class PretrainResult:
    encoder: VisionTransformer
    accuracy: float
    """Probe accuracy on the validation images."""


def pretrain_encoder(
    cfg: RunConfig, steps: Optional[int] = None, eval_samples: int = 64
) -> PretrainResult:
    """Trains the encoder to recognise the dominant class of an image.

    A linear probe on the final class token is trained together with
    the encoder, then discarded.
    """
    p = cfg.pretrain
    total = p.steps if steps is None else steps
    init = np.random.default_rng(cfg.seed)
    encoder = VisionTransformer(cfg.model, init)
    probe = Linear(cfg.model.embed_dim, cfg.model.num_classes, init, cfg.model.init_std)
    params = {f"encoder.{n}": q for n, q in encoder.named_parameters()}
    params.update({f"probe.{n}": q for n, q in probe.named_parameters()})
    optimizer = AdamW(params, weight_decay=p.weight_decay)
    schedule = ScheduleConfig(
        total_steps=total, warmup_steps=p.warmup_steps, lr=p.lr, lr_policy="cosine"
    )
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    train_set = SyntheticDataset(cfg.data, Split.TRAIN)

    def logits_of(image: np.ndarray) -> Tensor:
        out = encoder(as_tensor(image))
        return probe(encoder.norm(out.prefix[0:1]))

    for step in range(total):
        indices = rng.integers(0, len(train_set), size=p.batch_size)
        with Tape() as tape:
            loss: Any = None
            for i in indices:
                sample = train_set[int(i)]
                label = np.array([dominant_class(sample.panoptic)])
                term = cross_entropy(logits_of(sample.image), label)
                loss = term if loss is None else loss + term
            loss = loss * (1.0 / len(indices))
        if not np.isfinite(float(loss.data)):
            raise NonFiniteLossError(step, f"Non-finite pretext loss at step {step}")
        tape.backward(loss)
        optimizer.step(learning_rate(step, schedule))
        optimizer.zero_grad()
        if step % 50 == 0:
            logging.info(f"pretext step {step}: loss {float(loss.data):.4f}")

    val_set = SyntheticDataset(cfg.data, Split.VAL)
    n = min(eval_samples, len(val_set))
    correct = 0
    for i in range(n):
        sample = val_set[i]
        guess = int(np.argmax(logits_of(sample.image).data))
        correct += int(guess == dominant_class(sample.panoptic))
    accuracy = correct / n if n else 0.0
    logging.info(f"Pretext probe accuracy: {accuracy:.3f} on {n} images")
    return PretrainResult(encoder, accuracy)

"""Minibatch training with prompt-level data augmentation.

Detection-style records are trained through randomly down-sampled,
shuffled class-list prompts; caption-style records through their captions,
optionally mixed with negative captions from other records. The language
encoder trains at a tenth of the base learning rate and the schedule steps
down twice, at 67% and 89% of the run.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .chunker import extract_noun_phrases
from .errors import DivergenceDetected, PoolTooSmall, TooManyTokens
from .inference import classifier_prompt
from .losses import LossReport, record_loss
from .model import GroundingModel
from .prompts import (
    PromptConfig,
    TokenizedPrompt,
    build_detection_prompt,
    build_grounding_prompt,
    downsample_categories,
    mix_negative_captions,
)
from .records import GroundedRecord, load_image
from .targets import match_anchors


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1500
    batch_size: int = 8
    lr: float = 1e-4
    text_lr_factor: float = 0.1      # language backbone trains at lr/10
    optimizer: str = "adam"          # or "sgd" (momentum 0.9)
    momentum: float = 0.9
    weight_decay: float = 0.0
    decay_milestones: tuple[float, float] = (0.67, 0.89)
    decay_factor: float = 0.1
    tau_pos: float = 0.5
    tau_neg: float = 0.4
    gamma: float = 2.0
    alpha: float = 0.25
    grad_clip: float = 10.0
    smooth_l1_beta: float = 0.11   # sharper gradient near zero for tight boxes
    gold_caption_fraction: float = 0.3  # chance a gold record trains via its caption
    mix_captions: bool = True
    seed: int = 0

    def lr_at(self, step: int) -> float:
        lr = self.lr
        for milestone in self.decay_milestones:
            if step >= int(milestone * self.steps):
                lr *= self.decay_factor
        return lr


def record_rng(seed: int, step: int, image_id: str) -> np.random.Generator:
    """Augmentation RNG derived from record identity, independent of worker order."""
    digest = hashlib.blake2s(f"{seed}:{step}:{image_id}".encode(), digest_size=8).digest()
    return np.random.default_rng(int.from_bytes(digest, "big"))


@dataclass
class PreparedRecord:
    prompt: TokenizedPrompt
    gt_boxes: np.ndarray
    gt_phrase_ids: np.ndarray


def prepare_detection_record(
    record: GroundedRecord,
    vocabulary: Sequence[str],
    prompt_config: PromptConfig,
    rng: np.random.Generator,
) -> PreparedRecord:
    positives = record.class_names
    negatives = [c for c in vocabulary if c not in positives]
    names = downsample_categories(positives, negatives, prompt_config.downsample_cap, rng)
    # phrase features are order-independent (phrase-isolated attention), so a
    # canonical order costs nothing and lets same-vocabulary records share one
    # batched forward pass
    names = sorted(names)
    prompt = build_detection_prompt(names, prompt_config)
    index = {name: i for i, name in enumerate(names)}
    boxes: list = []
    ids: list[int] = []
    for ann in record.annotations:
        if ann.class_name in index:
            for box in ann.boxes:
                boxes.append(box)
                ids.append(index[ann.class_name])
    return PreparedRecord(
        prompt,
        np.array(boxes, dtype=np.float64).reshape(-1, 4),
        np.array(ids, dtype=np.int64),
    )


def prepare_caption_record(
    record: GroundedRecord,
    caption_pool: Sequence[str],
    prompt_config: PromptConfig,
    rng: np.random.Generator,
    mix: bool = True,
) -> PreparedRecord:
    caption, offset = record.caption, 0
    if mix and caption_pool:
        try:
            mixed, (start, _end) = mix_negative_captions(
                record.caption, caption_pool, rng, prompt_config.separator
            )
            shifted = [(start + s, start + e) for s, e in (a.char_span for a in record.annotations)]
            # probe the combined prompt against the token limit before committing
            build_grounding_prompt(mixed, shifted, prompt_config)
            caption, offset = mixed, start
        except (TooManyTokens, PoolTooSmall):
            # tiny pools and over-long prompts train on the bare caption
            pass

    pos_spans = [(offset + s, offset + e) for s, e in (a.char_span for a in record.annotations)]
    # negative captions contribute phrases with no boxes; the chunker finds
    # them anywhere outside the positive caption's region
    negative_spans = [
        p.char_span
        for p in extract_noun_phrases(caption)
        if p.char_span[1] <= offset or p.char_span[0] >= offset + len(record.caption)
    ]
    spans = sorted(pos_spans + negative_spans)
    prompt = build_grounding_prompt(caption, spans, prompt_config)
    span_index = {span: i for i, span in enumerate(spans)}
    boxes: list = []
    ids: list[int] = []
    for ann, span in zip(record.annotations, pos_spans):
        for box in ann.boxes:
            boxes.append(box)
            ids.append(span_index[span])
    return PreparedRecord(
        prompt,
        np.array(boxes, dtype=np.float64).reshape(-1, 4),
        np.array(ids, dtype=np.int64),
    )


def prepare_record(
    record: GroundedRecord,
    vocabulary: Sequence[str],
    caption_pool: Sequence[str],
    config: TrainConfig,
    prompt_config: PromptConfig,
    rng: np.random.Generator,
    classifier_names: Sequence[str] | None = None,
) -> PreparedRecord:
    if classifier_names is not None:
        prompt = classifier_prompt(classifier_names)
        index = {name: i for i, name in enumerate(classifier_names)}
        boxes: list = []
        ids: list[int] = []
        for ann in record.annotations:
            if ann.class_name in index:
                for box in ann.boxes:
                    boxes.append(box)
                    ids.append(index[ann.class_name])
        return PreparedRecord(
            prompt,
            np.array(boxes, dtype=np.float64).reshape(-1, 4),
            np.array(ids, dtype=np.int64),
        )
    as_caption = record.provenance == "pseudo" or not record.class_names
    if not as_caption and config.gold_caption_fraction > 0:
        as_caption = rng.random() < config.gold_caption_fraction
    if as_caption:
        return prepare_caption_record(
            record, caption_pool, prompt_config, rng, mix=config.mix_captions
        )
    return prepare_detection_record(record, vocabulary, prompt_config, rng)


@dataclass
class TrainResult:
    model: GroundingModel
    loss_curve: list[dict]
    final_report: LossReport | None


def make_optimizer(model: GroundingModel, config: TrainConfig) -> torch.optim.Optimizer:
    """Two parameter groups: the language backbone at lr * text_lr_factor."""
    text_params = [p for n, p in model.named_parameters() if n.startswith("text.") and p.requires_grad]
    rest = [p for n, p in model.named_parameters() if not n.startswith("text.") and p.requires_grad]
    groups = [
        {"params": rest, "lr": config.lr, "base_lr": config.lr},
        {
            "params": text_params,
            "lr": config.lr * config.text_lr_factor,
            "base_lr": config.lr * config.text_lr_factor,
        },
    ]
    if config.optimizer == "sgd":
        return torch.optim.SGD(groups, momentum=config.momentum, weight_decay=config.weight_decay)
    if config.optimizer == "adam":
        return torch.optim.Adam(groups, weight_decay=config.weight_decay)
    raise ValueError(f"unknown optimizer {config.optimizer!r}")


def train(
    model: GroundingModel,
    records: Sequence[GroundedRecord],
    vocabulary: Sequence[str],
    config: TrainConfig,
    prompt_config: PromptConfig | None = None,
    loss_log_path: str | Path | None = None,
    image_root: str | Path | None = None,
) -> TrainResult:
    """Minibatch gradient descent over grounded records; deterministic under
    the config seed. Raises DivergenceDetected on a non-finite loss."""
    if not records:
        raise ValueError("dataset is empty")
    prompt_config = prompt_config or PromptConfig()
    torch.manual_seed(config.seed)
    order_rng = np.random.default_rng(config.seed)
    optimizer = make_optimizer(model, config)
    captions = [r.caption for r in records]
    classifier_names = (
        list(vocabulary) if model.config.classifier_classes else None
    )
    if classifier_names is not None and len(classifier_names) != model.config.classifier_classes:
        raise ValueError("vocabulary size must match the classical head width")

    log_fh = open(loss_log_path, "a", encoding="utf-8") if loss_log_path else None
    curve: list[dict] = []
    final_report: LossReport | None = None
    model.train()
    try:
        for step in range(config.steps):
            lr = config.lr_at(step)
            for group in optimizer.param_groups:
                group["lr"] = group["base_lr"] / config.lr * lr

            batch = order_rng.integers(0, len(records), size=config.batch_size)
            total = None
            cls_sum = loc_sum = 0.0
            matched = 0

            # records sharing a prompt run as one batched forward
            groups: dict[tuple, list[tuple[GroundedRecord, PreparedRecord]]] = {}
            for i in batch:
                record = records[int(i)]
                rng = record_rng(config.seed, step, record.image_id)
                pool = captions[: int(i)] + captions[int(i) + 1 :]
                prepared = prepare_record(
                    record, vocabulary, pool, config, prompt_config, rng, classifier_names
                )
                key = (prepared.prompt.text, prepared.prompt.phrase_token_spans)
                groups.setdefault(key, []).append((record, prepared))

            for members in groups.values():
                prompt = members[0][1].prompt
                images = torch.from_numpy(
                    np.stack(
                        [
                            np.ascontiguousarray(load_image(r, image_root), dtype=np.float32)
                            for r, _ in members
                        ]
                    )
                )
                output = model(images, prompt)
                for b, (record, prepared) in enumerate(members):
                    targets = match_anchors(
                        output.anchors,
                        prepared.gt_boxes,
                        prepared.gt_phrase_ids,
                        prompt.num_phrases,
                        config.tau_pos,
                        config.tau_neg,
                    )
                    loss, report = record_loss(
                        output.logits[b],
                        output.deltas[b],
                        output.anchors,
                        targets,
                        prepared.gt_boxes,
                        prompt,
                        model.config.loss_mode,
                        gamma=config.gamma,
                        alpha=config.alpha,
                        smooth_l1_beta=config.smooth_l1_beta,
                    )
                    total = loss if total is None else total + loss
                    cls_sum += report.cls
                    loc_sum += report.loc
                    matched += report.matched_anchor_count
            total = total / config.batch_size
            if not torch.isfinite(total):
                raise DivergenceDetected(f"loss became non-finite at step {step}")
            optimizer.zero_grad()
            total.backward()
            if config.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            optimizer.step()

            entry = {
                "step": step,
                "cls": cls_sum / config.batch_size,
                "loc": loc_sum / config.batch_size,
                "total": float(total.detach()),
                "lr": lr,
            }
            curve.append(entry)
            final_report = LossReport(
                total=entry["total"],
                cls=entry["cls"],
                loc=entry["loc"],
                matched_anchor_count=matched,
            )
            if log_fh:
                log_fh.write(json.dumps(entry) + "\n")
    finally:
        if log_fh:
            log_fh.close()
    model.eval()
    return TrainResult(model=model, loss_curve=curve, final_report=final_report)

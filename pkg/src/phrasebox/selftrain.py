"""Pseudo-label self-training: a teacher checkpoint grounds noun phrases in
raw image-caption pairs; confident boxes become a student training corpus."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .chunker import extract_noun_phrases
from .inference import DecodeConfig, infer
from .model import GroundingModel, load_checkpoint
from .prompts import PromptConfig, build_grounding_prompt
from .records import Annotation, GroundedRecord, load_image


@dataclass
class CaptionedImage:
    image_id: str
    caption: str
    image: np.ndarray | None = None
    image_path: str | None = None


def generate_pseudo_labels(
    teacher: GroundingModel | str | Path,
    captioned_images: Sequence[CaptionedImage],
    threshold: float = 0.5,
    prompt_config: PromptConfig | None = None,
    decode: DecodeConfig = DecodeConfig(),
    image_root=None,
) -> list[GroundedRecord]:
    """Ground each caption's noun phrases and keep boxes scoring above the
    confidence threshold (strictly greater).

    Captions with no noun phrases are skipped; phrases whose boxes all fall
    below the threshold are dropped from the annotations but stay in the
    caption text, where they act as natural negatives. Records where nothing
    survives are skipped entirely. The pipeline is deterministic: rerunning
    with the same teacher yields byte-identical records.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie strictly inside (0, 1)")
    if not isinstance(teacher, GroundingModel):
        model, _ = load_checkpoint(teacher)
    else:
        model = teacher
    prompt_config = prompt_config or PromptConfig()
    records: list[GroundedRecord] = []
    for item in sorted(captioned_images, key=lambda c: c.image_id):
        phrases = extract_noun_phrases(item.caption)
        if not phrases:
            continue
        prompt = build_grounding_prompt(
            item.caption, [p.char_span for p in phrases], prompt_config
        )
        stub = GroundedRecord(
            image_id=item.image_id,
            caption=item.caption,
            annotations=[],
            image=item.image,
            image_path=item.image_path,
        )
        image = load_image(stub, image_root)
        detections = infer(model, image, prompt, decode)
        annotations: list[Annotation] = []
        for p, phrase in enumerate(phrases):
            kept = [d for d in detections if d.phrase_index == p and d.score > threshold]
            if not kept:
                continue
            annotations.append(
                Annotation(
                    char_span=phrase.char_span,
                    class_name=phrase.text,
                    boxes=[d.box for d in kept],
                    confidences=[d.score for d in kept],
                )
            )
        if not annotations:
            continue
        record = GroundedRecord(
            image_id=item.image_id,
            caption=item.caption,
            annotations=annotations,
            provenance="pseudo",
            image=item.image,
            image_path=item.image_path,
        )
        record.validate()
        records.append(record)
    return records


@dataclass
class CorpusReport:
    gold_count: int
    pseudo_count: int
    duplicate_image_ids: list[str]


def assemble_student_corpus(
    gold: Sequence[GroundedRecord],
    pseudo: Sequence[GroundedRecord],
    mixing: tuple[int, int] = (1, 1),
) -> tuple[list[GroundedRecord], CorpusReport]:
    """Interleave gold and pseudo records by the given ratio (Bresenham-style,
    so any window of the stream honors the ratio within one record).

    Records keep their provenance; duplicate image ids across sources are kept
    and flagged in the report.
    """
    g_w, p_w = mixing
    if g_w < 0 or p_w < 0 or (g_w == 0 and p_w == 0):
        raise ValueError("mixing ratio must have a positive component")
    gold = list(gold)
    pseudo = list(pseudo)
    if p_w == 0 or not pseudo:
        stream = gold[:]
    elif g_w == 0 or not gold:
        stream = pseudo[:]
    else:
        stream = []
        gi = pi = 0
        acc_g = acc_p = 0
        while gi < len(gold) or pi < len(pseudo):
            take_gold = (acc_g + p_w <= acc_p + g_w and gi < len(gold)) or pi >= len(pseudo)
            if take_gold:
                stream.append(gold[gi])
                gi += 1
                acc_g += p_w
            else:
                stream.append(pseudo[pi])
                pi += 1
                acc_p += g_w
    dupes = sorted(
        {r.image_id for r in gold} & {r.image_id for r in pseudo}
    )
    report = CorpusReport(
        gold_count=len(gold), pseudo_count=len(pseudo), duplicate_image_ids=dupes
    )
    return stream, report

"""Dataset-level evaluation: detection AP over a class vocabulary and
grounding recall over caption records."""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch

from .inference import (
    DecodeConfig,
    Detection,
    decode_detections,
    decode_logits,
    infer_chunked,
    phrase_scores,
)
from .metrics import EvalResult, compute_ap, compute_recall_at_k
from .model import GroundingModel
from .prompts import PromptConfig, build_detection_prompt, build_grounding_prompt
from .records import GroundedRecord, load_image


def ground_truth_index(records: Sequence[GroundedRecord]) -> dict[str, list]:
    gts: dict[str, list] = {}
    for record in records:
        anns = []
        for ann in record.annotations:
            if ann.class_name:
                anns.extend((tuple(box), ann.class_name) for box in ann.boxes)
        gts[record.image_id] = anns
    return gts


def detect_all(
    model: GroundingModel,
    records: Sequence[GroundedRecord],
    class_names: Sequence[str],
    prompt_config: PromptConfig | None = None,
    decode: DecodeConfig = DecodeConfig(),
    chunked: bool = False,
    batch_size: int = 16,
    image_root=None,
    p0_override: torch.Tensor | None = None,
) -> dict[str, list[Detection]]:
    """Detections per image id for a fixed vocabulary prompt."""
    prompt_config = prompt_config or PromptConfig()
    model.eval()
    out: dict[str, list[Detection]] = {}
    if chunked:
        for record in records:
            out[record.image_id] = infer_chunked(
                model, load_image(record, image_root), class_names, prompt_config, decode
            )
        return out

    prompt = build_detection_prompt(class_names, prompt_config)
    with torch.no_grad():
        for lo in range(0, len(records), batch_size):
            batch = records[lo : lo + batch_size]
            images = torch.from_numpy(
                np.stack(
                    [np.ascontiguousarray(load_image(r, image_root), dtype=np.float32) for r in batch]
                )
            )
            output = model(images, prompt, p0_override=p0_override, canonical_text=True)
            deltas = output.deltas.cpu().numpy()
            logits = decode_logits(model, output)
            for b, record in enumerate(batch):
                scores = phrase_scores(logits[b], prompt, model.config.loss_mode)
                out[record.image_id] = decode_detections(
                    scores, deltas[b], output.anchors, prompt, model.config.image_size, decode
                )
    return out


def evaluate_detection(
    model: GroundingModel,
    records: Sequence[GroundedRecord],
    class_names: Sequence[str],
    prompt_config: PromptConfig | None = None,
    decode: DecodeConfig = DecodeConfig(),
    chunked: bool = False,
    image_root=None,
    p0_override: torch.Tensor | None = None,
    name_map: dict[str, str] | None = None,
) -> tuple[EvalResult, dict[str, list[Detection]]]:
    """AP over `class_names`; `name_map` relabels detection phrase texts back
    to reporting names (used by manual prompt rewrites)."""
    detections = detect_all(
        model,
        records,
        class_names,
        prompt_config,
        decode,
        chunked,
        image_root=image_root,
        p0_override=p0_override,
    )
    det_index = {
        image_id: [
            (d.box, name_map.get(d.phrase_text, d.phrase_text) if name_map else d.phrase_text, d.score)
            for d in dets
        ]
        for image_id, dets in detections.items()
    }
    result = compute_ap(det_index, ground_truth_index(records))
    return result, detections


def evaluate_grounding(
    model: GroundingModel,
    records: Sequence[GroundedRecord],
    prompt_config: PromptConfig | None = None,
    ks: tuple[int, ...] = (1, 5, 10),
    image_root=None,
) -> dict[int, float]:
    """Any-box recall@k over caption records, one prompt per record."""
    prompt_config = prompt_config or PromptConfig()
    decode = DecodeConfig(score_thresh=0.0, max_detections=100)
    predictions: dict[tuple[str, int], list] = {}
    gold: dict[tuple[str, int], list] = {}
    model.eval()
    with torch.no_grad():
        for record in records:
            prompt = build_grounding_prompt(
                record.caption, [a.char_span for a in record.annotations], prompt_config
            )
            image = torch.from_numpy(
                np.ascontiguousarray(load_image(record, image_root), dtype=np.float32)
            )
            output = model(image, prompt, canonical_text=True)
            scores = phrase_scores(decode_logits(model, output)[0], prompt, model.config.loss_mode)
            dets = decode_detections(
                scores, output.deltas[0].cpu().numpy(), output.anchors, prompt,
                model.config.image_size, decode,
            )
            for p, ann in enumerate(record.annotations):
                gold[(record.image_id, p)] = [tuple(b) for b in ann.boxes]
                predictions[(record.image_id, p)] = [
                    (d.box, d.score) for d in dets if d.phrase_index == p
                ]
    return compute_recall_at_k(predictions, gold, ks=ks)

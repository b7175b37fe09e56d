"""From alignment logits to phrase-level detections."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .boxes import decode_boxes, iou_matrix
from .errors import PhraseboxError
from .model import GroundingModel
from .prompts import PromptConfig, TokenizedPrompt, build_detection_prompt, chunk_class_lists


@dataclass(frozen=True)
class Detection:
    box: tuple[float, float, float, float]
    phrase_index: int
    phrase_text: str
    score: float
    anchor_index: int = -1

    def to_dict(self) -> dict:
        return {
            "box": [float(v) for v in self.box],
            "class": self.phrase_text,
            "score": float(self.score),
            "phrase_index": int(self.phrase_index),
            "anchor_index": int(self.anchor_index),
        }


@dataclass(frozen=True)
class DecodeConfig:
    score_thresh: float = 0.05
    nms_iou: float = 0.6
    max_detections: int = 100

    def __post_init__(self) -> None:
        if not (0.0 <= self.score_thresh <= 1.0 and 0.0 <= self.nms_iou <= 1.0):
            raise ValueError("thresholds must lie in [0, 1]")


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def decode_logits(model: "GroundingModel", output) -> np.ndarray:
    """Alignment logits for decoding, (B, N, M) float64, with a per-element
    reduction that does not depend on the prompt width.

    BLAS gemm kernels change with matrix shape, so the same region-token dot
    product can differ in its last bits between a chunked and an unchunked
    prompt. einsum's elementwise reduction keeps late-fusion chunked inference
    exactly equal to the unchunked run.
    """
    o_t = output.region_features
    if model.config.region_proj:
        o_t = model.region_proj(o_t)
    o = o_t.detach().cpu().numpy().astype(np.float64)
    p = output.token_features.detach().cpu().numpy().astype(np.float64)
    return np.einsum("bnd,bmd->bnm", o, p, optimize=False)


def phrase_scores(
    logits: np.ndarray | torch.Tensor, prompt: TokenizedPrompt, mode: str
) -> np.ndarray:
    """Aggregate token logits into per-phrase probabilities, shape (N, c).

    Focal mode averages token sigmoids over each phrase's span; CE mode sums
    the anchor's softmax over the span (clamped to [0, 1])."""
    s = logits.detach().cpu().numpy() if isinstance(logits, torch.Tensor) else np.asarray(logits)
    if s.ndim != 2 or s.shape[1] != prompt.num_tokens:
        raise ValueError(f"logit shape {s.shape} does not match prompt of {prompt.num_tokens} tokens")
    spans = prompt.phrase_token_spans
    if any(len(span) == 0 for span in spans):
        raise PhraseboxError("corrupt prompt: empty phrase span")
    out = np.empty((s.shape[0], len(spans)), dtype=np.float64)
    if mode == "focal_sigmoid":
        probs = sigmoid_np(s)
        for p, span in enumerate(spans):
            out[:, p] = probs[:, list(span)].mean(axis=1)
    elif mode == "softmax_ce":
        shifted = s.astype(np.float64) - s.max(axis=1, keepdims=True)
        probs = np.exp(shifted)
        probs /= probs.sum(axis=1, keepdims=True)
        for p, span in enumerate(spans):
            out[:, p] = np.clip(probs[:, list(span)].sum(axis=1), 0.0, 1.0)
    else:
        raise ValueError(f"unknown score mode {mode!r}")
    return out


def greedy_nms(
    boxes: np.ndarray, scores: np.ndarray, anchor_indices: np.ndarray, iou_threshold: float
) -> list[int]:
    """Greedy NMS; candidates ordered by descending score with ties broken by
    ascending anchor index. Returns kept positions into the input arrays."""
    if len(boxes) == 0:
        return []
    order = np.lexsort((anchor_indices, -scores))
    kept: list[int] = []
    suppressed = np.zeros(len(boxes), dtype=bool)
    for idx in order:
        if suppressed[idx]:
            continue
        kept.append(int(idx))
        ious = iou_matrix(boxes[idx : idx + 1], boxes)[0]
        suppressed |= ious > iou_threshold
        suppressed[idx] = True
    return kept


@dataclass
class _Candidate:
    box: tuple[float, float, float, float]
    score: float
    anchor_index: int


def _decode_candidates(
    scores: np.ndarray,
    deltas: np.ndarray,
    anchors: np.ndarray,
    image_size: float,
    score_thresh: float,
) -> list[list[_Candidate]]:
    """Per-phrase above-threshold candidates with decoded boxes."""
    boxes = decode_boxes(deltas, anchors, image_size)
    out: list[list[_Candidate]] = []
    for p in range(scores.shape[1]):
        keep = np.nonzero(scores[:, p] > score_thresh)[0]
        out.append(
            [_Candidate(tuple(boxes[i]), float(scores[i, p]), int(i)) for i in keep]
        )
    return out


def _nms_and_truncate(
    per_class: dict[int, list[_Candidate]],
    phrase_texts: dict[int, str],
    decode: DecodeConfig,
) -> list[Detection]:
    """Per-class NMS followed by a global score cut to max_detections."""
    survivors: list[Detection] = []
    for cls_index in sorted(per_class):
        cands = per_class[cls_index]
        if not cands:
            continue
        boxes = np.array([c.box for c in cands], dtype=np.float64)
        scores = np.array([c.score for c in cands])
        anchor_idx = np.array([c.anchor_index for c in cands])
        for i in greedy_nms(boxes, scores, anchor_idx, decode.nms_iou):
            survivors.append(
                Detection(
                    box=cands[i].box,
                    phrase_index=cls_index,
                    phrase_text=phrase_texts[cls_index],
                    score=cands[i].score,
                    anchor_index=cands[i].anchor_index,
                )
            )
    survivors.sort(key=lambda d: (-d.score, d.phrase_index, d.anchor_index))
    return survivors[: decode.max_detections]


def decode_detections(
    scores: np.ndarray,
    deltas: np.ndarray,
    anchors: np.ndarray,
    prompt: TokenizedPrompt,
    image_size: float,
    decode: DecodeConfig = DecodeConfig(),
) -> list[Detection]:
    """Threshold, per-phrase greedy NMS, global truncation by score."""
    candidates = _decode_candidates(scores, deltas, anchors, image_size, decode.score_thresh)
    per_class = {p: cands for p, cands in enumerate(candidates)}
    texts = {p: phrase.text for p, phrase in enumerate(prompt.phrases)}
    return _nms_and_truncate(per_class, texts, decode)


def infer(
    model: GroundingModel,
    image: np.ndarray,
    prompt: TokenizedPrompt,
    decode: DecodeConfig = DecodeConfig(),
    p0_override: torch.Tensor | None = None,
) -> list[Detection]:
    """Single forward pass and decode for one image."""
    model.eval()
    with torch.no_grad():
        tensor = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))
        output = model(tensor, prompt, p0_override=p0_override, canonical_text=True)
        scores = phrase_scores(decode_logits(model, output)[0], prompt, model.config.loss_mode)
        deltas = output.deltas[0].cpu().numpy()
    return decode_detections(
        scores, deltas, output.anchors, prompt, model.config.image_size, decode
    )


def infer_chunked(
    model: GroundingModel,
    image: np.ndarray,
    class_names: Sequence[str],
    prompt_config: PromptConfig | None = None,
    decode: DecodeConfig = DecodeConfig(),
) -> list[Detection]:
    """Run the model once per vocabulary chunk and pool detections.

    Phrase indices are remapped to the global class list; one global per-class
    NMS plus the max-detection cut runs after pooling, so a vocabulary that
    fits one chunk decodes identically to direct inference.
    """
    prompt_config = prompt_config or PromptConfig()
    chunks = chunk_class_lists(class_names, prompt_config.chunk_size)
    model.eval()
    per_class: dict[int, list[_Candidate]] = {}
    texts: dict[int, str] = {}
    offset = 0
    with torch.no_grad():
        tensor = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))
        for chunk in chunks:
            prompt = build_detection_prompt(chunk, prompt_config)
            output = model(tensor, prompt, canonical_text=True)
            scores = phrase_scores(decode_logits(model, output)[0], prompt, model.config.loss_mode)
            deltas = output.deltas[0].cpu().numpy()
            candidates = _decode_candidates(
                scores, deltas, output.anchors, model.config.image_size, decode.score_thresh
            )
            for local, cands in enumerate(candidates):
                per_class[offset + local] = cands
                texts[offset + local] = chunk[local]
            offset += len(chunk)
    return _nms_and_truncate(per_class, texts, decode)


@dataclass
class EquivalenceReport:
    max_abs_diff: float
    logits_identical: bool
    detections_identical: bool
    images_checked: int


def detection_mode_check(
    classical: GroundingModel,
    images: Sequence[np.ndarray],
    class_names: Sequence[str],
    decode: DecodeConfig = DecodeConfig(),
) -> EquivalenceReport:
    """Verify the grounding view of a classical-head model is the same model.

    Token features are tied to the donor class-weight matrix (plus a zero
    no-object row); alignment logits must equal the classifier logits exactly
    and the decoded detection lists must be identical.
    """
    if classical.config.classifier_classes != len(class_names):
        raise ValueError("class list does not match the classifier width")
    prompt = classifier_prompt(class_names)
    classical.eval()
    max_diff = 0.0
    logits_same = True
    dets_same = True
    with torch.no_grad():
        for image in images:
            tensor = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))
            output = classical(tensor, prompt)
            s_cls = classical.classification_logits(output.region_features)[0]
            s_ground = output.logits[0]
            diff = (s_cls - s_ground).abs().max().item()
            max_diff = max(max_diff, diff)
            logits_same &= bool(torch.equal(s_cls, s_ground))

            # classical decode: per-class sigmoid scores straight off S_cls
            cls_scores = sigmoid_np(s_cls.cpu().numpy())
            deltas = output.deltas[0].cpu().numpy()
            classical_dets = decode_detections(
                cls_scores, deltas, output.anchors, prompt, classical.config.image_size, decode
            )
            grounding_scores = phrase_scores(output.logits[0], prompt, "focal_sigmoid")
            grounding_dets = decode_detections(
                grounding_scores, deltas, output.anchors, prompt, classical.config.image_size, decode
            )
            dets_same &= classical_dets == grounding_dets
    return EquivalenceReport(
        max_abs_diff=max_diff,
        logits_identical=logits_same,
        detections_identical=dets_same,
        images_checked=len(images),
    )


def classifier_prompt(class_names: Sequence[str]) -> TokenizedPrompt:
    """Synthetic prompt where phrase i owns exactly token i, mirroring the
    rows of a classical classifier weight matrix. No separator or no-object
    slots: the classical head has exactly one column per class."""
    from .prompts import NUM_RESERVED_IDS, Phrase

    c = len(class_names)
    text = " ".join(class_names)
    phrases = []
    spans = []
    cursor = 0
    for name in class_names:
        phrases.append(Phrase(text=name, char_span=(cursor, cursor + len(name))))
        spans.append((cursor, cursor + len(name)))
        cursor += len(name) + 1
    return TokenizedPrompt(
        text=text,
        token_ids=tuple(range(NUM_RESERVED_IDS, NUM_RESERVED_IDS + c)),
        token_strings=tuple(class_names),
        token_spans=tuple(spans),
        phrases=tuple(phrases),
        phrase_token_spans=tuple((i,) for i in range(c)),
        special_mask=tuple([False] * c),
    )

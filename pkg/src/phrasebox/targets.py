"""Anchor-to-ground-truth matching and phrase-to-token target expansion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .boxes import iou_matrix
from .errors import PhraseCountMismatch
from .prompts import TokenizedPrompt


@dataclass
class TargetMatrix:
    """Binary (N, c) phrase targets plus per-anchor assignment bookkeeping."""

    matrix: np.ndarray        # (N, c) uint8
    assigned_gt: np.ndarray   # (N,) int, -1 where unassigned
    ignore: np.ndarray        # (N,) bool, excluded from the classification loss

    @property
    def num_positive(self) -> int:
        return int((self.assigned_gt >= 0).sum())


def match_anchors(
    anchors: np.ndarray,
    gt_boxes: np.ndarray,
    gt_phrase_ids: np.ndarray,
    num_phrases: int,
    tau_pos: float = 0.5,
    tau_neg: float = 0.4,
) -> TargetMatrix:
    """Classical many-to-one matching with an ignore band and force matching.

    An anchor is positive for its best ground truth at IoU >= tau_pos, negative
    below tau_neg, and ignored in between. Every ground truth additionally
    claims its single best anchor (ties to the lowest anchor index) even below
    tau_pos; when two ground truths claim the same anchor the higher IoU wins,
    ties to the lower ground-truth index.
    """
    if not 0.0 <= tau_neg <= tau_pos <= 1.0:
        raise ValueError("need 0 <= tau_neg <= tau_pos <= 1")
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    n = anchors.shape[0]
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_phrase_ids = np.asarray(gt_phrase_ids, dtype=np.int64).reshape(-1)
    g = gt_boxes.shape[0]

    matrix = np.zeros((n, num_phrases), dtype=np.uint8)
    assigned = np.full(n, -1, dtype=np.int64)
    ignore = np.zeros(n, dtype=bool)
    if g == 0:
        return TargetMatrix(matrix, assigned, ignore)
    if gt_phrase_ids.shape[0] != g:
        raise ValueError("one phrase id per ground-truth box required")
    if gt_phrase_ids.min() < 0 or gt_phrase_ids.max() >= num_phrases:
        raise PhraseCountMismatch("ground-truth phrase id outside prompt phrase range")

    iou = iou_matrix(anchors, gt_boxes)  # (N, G)
    best_gt = iou.argmax(axis=1)
    best_iou = iou[np.arange(n), best_gt]

    positive = best_iou >= tau_pos
    assigned[positive] = best_gt[positive]
    ignore = (best_iou >= tau_neg) & ~positive

    # force matching: argmax over anchors already breaks ties toward the
    # lowest anchor index
    force_anchor = iou.argmax(axis=0)
    claimed: dict[int, tuple[float, int]] = {}
    for j in range(g):
        a = int(force_anchor[j])
        score = float(iou[a, j])
        if a not in claimed or score > claimed[a][0]:
            claimed[a] = (score, j)
    for a, (_, j) in claimed.items():
        assigned[a] = j
        ignore[a] = False

    pos_idx = np.nonzero(assigned >= 0)[0]
    matrix[pos_idx, gt_phrase_ids[assigned[pos_idx]]] = 1
    return TargetMatrix(matrix, assigned, ignore)


def expand_targets(targets: TargetMatrix | np.ndarray, prompt: TokenizedPrompt) -> np.ndarray:
    """Expand phrase targets (N, c) onto token columns (N, M).

    A token column copies its owning phrase's column; unowned columns
    (separators, added words, the no-object token) stay zero.
    """
    matrix = targets.matrix if isinstance(targets, TargetMatrix) else np.asarray(targets)
    n, c = matrix.shape
    if c != prompt.num_phrases:
        raise PhraseCountMismatch(
            f"target matrix has {c} phrase columns, prompt has {prompt.num_phrases}"
        )
    owner = np.array(prompt.token_to_phrase(), dtype=np.int64)  # (M,)
    expanded = np.zeros((n, prompt.num_tokens), dtype=np.uint8)
    owned = owner >= 0
    expanded[:, owned] = matrix[:, owner[owned]]
    return expanded

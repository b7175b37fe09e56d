"""Grounding classification loss (focal-sigmoid and softmax-CE modes),
localization loss, and the per-record total."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .boxes import encode_boxes
from .errors import NoValidElements
from .prompts import TokenizedPrompt
from .targets import TargetMatrix, expand_targets


@dataclass
class LossReport:
    total: float
    cls: float
    loc: float
    matched_anchor_count: int


def grounding_loss(
    logits: torch.Tensor,
    expanded: np.ndarray | torch.Tensor,
    mode: str,
    prompt: TokenizedPrompt,
    ignore: np.ndarray | None = None,
    gamma: float = 2.0,
    alpha: float = 0.25,
) -> torch.Tensor:
    """Alignment-score classification loss over an (N, M) logit matrix.

    Focal mode treats every token column as an independent binary target
    (added and special tokens are negatives) and normalizes by the positive
    pair count. CE mode softmaxes each anchor's row over tokens; unmatched
    anchors are targeted at the no-object column, matched anchors at a uniform
    distribution over their phrase's tokens.
    """
    if logits.dim() != 2:
        raise ValueError("grounding_loss expects a single (N, M) logit matrix")
    n, m = logits.shape
    target = torch.as_tensor(np.asarray(expanded), dtype=logits.dtype, device=logits.device)
    if target.shape != (n, m):
        raise ValueError(f"target shape {tuple(target.shape)} != logits shape {(n, m)}")
    keep_rows = torch.ones(n, dtype=torch.bool, device=logits.device)
    if ignore is not None:
        keep_rows = ~torch.as_tensor(np.asarray(ignore, dtype=bool), device=logits.device)
    if not bool(keep_rows.any()):
        raise NoValidElements("every anchor is ignored")

    logits = logits[keep_rows]
    target = target[keep_rows]

    if mode == "focal_sigmoid":
        log_p = F.logsigmoid(logits)
        log_not_p = F.logsigmoid(-logits)
        p = torch.sigmoid(logits)
        per_element = -alpha * target * (1 - p) ** gamma * log_p - (
            1 - alpha
        ) * (1 - target) * p**gamma * log_not_p
        num_pos = target.sum().clamp(min=1.0)
        return per_element.sum() / num_pos

    if mode == "softmax_ce":
        log_probs = F.log_softmax(logits, dim=1)
        dist = target / target.sum(dim=1, keepdim=True).clamp(min=1.0)
        unmatched = target.sum(dim=1) == 0
        if bool(unmatched.any()):
            noobj = torch.zeros(m, dtype=logits.dtype, device=logits.device)
            noobj[prompt.noobj_index] = 1.0
            dist = torch.where(unmatched[:, None], noobj[None, :], dist)
        return -(dist * log_probs).sum(dim=1).mean()

    raise ValueError(f"unknown loss mode {mode!r}")


def smooth_l1(diff: torch.Tensor, beta: float = 1.0) -> torch.Tensor:
    absdiff = diff.abs()
    return torch.where(absdiff < beta, 0.5 * diff**2 / beta, absdiff - 0.5 * beta)


def localization_loss(
    deltas: torch.Tensor,
    anchors: np.ndarray,
    targets: TargetMatrix,
    gt_boxes: np.ndarray,
    beta: float = 1.0,
) -> torch.Tensor:
    """Smooth-L1 between predicted and encoded ground-truth deltas at positive
    anchors; elementwise mean over the 4 coordinates, mean over anchors; zero
    when nothing matched."""
    pos = np.nonzero(targets.assigned_gt >= 0)[0]
    if pos.size == 0:
        return deltas.sum() * 0.0
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    encoded = encode_boxes(gt[targets.assigned_gt[pos]], np.asarray(anchors)[pos])
    encoded_t = torch.as_tensor(encoded, dtype=deltas.dtype, device=deltas.device)
    return smooth_l1(deltas[pos] - encoded_t, beta).mean(dim=1).mean()


def record_loss(
    logits: torch.Tensor,
    deltas: torch.Tensor,
    anchors: np.ndarray,
    targets: TargetMatrix,
    gt_boxes: np.ndarray,
    prompt: TokenizedPrompt,
    mode: str,
    gamma: float = 2.0,
    alpha: float = 0.25,
    smooth_l1_beta: float = 1.0,
) -> tuple[torch.Tensor, LossReport]:
    """Total objective for one record: classification plus localization."""
    expanded = expand_targets(targets, prompt)
    cls = grounding_loss(
        logits, expanded, mode, prompt, ignore=targets.ignore, gamma=gamma, alpha=alpha
    )
    loc = localization_loss(deltas, anchors, targets, gt_boxes, beta=smooth_l1_beta)
    total = cls + loc
    report = LossReport(
        total=float(total.detach()),
        cls=float(cls.detach()),
        loc=float(loc.detach()),
        matched_anchor_count=targets.num_positive,
    )
    return total, report

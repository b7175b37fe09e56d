"""Box geometry: IoU, anchor grids, delta encoding and decoding."""

from __future__ import annotations

import numpy as np

# keeps exp(dw) from blowing past any sane box-to-anchor ratio
MAX_LOG_SCALE = 6.0


def anchor_grid(image_size: int, grid: int) -> np.ndarray:
    """One anchor per grid cell, tiling the image exactly. Shape (grid*grid, 4)."""
    cell = image_size / grid
    anchors = np.empty((grid * grid, 4), dtype=np.float64)
    for gy in range(grid):
        for gx in range(grid):
            anchors[gy * grid + gx] = (gx * cell, gy * cell, (gx + 1) * cell, (gy + 1) * cell)
    return anchors


def iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Pairwise IoU, shape (len(a), len(b))."""
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.maximum(union, 1e-12), 0.0)


def encode_boxes(gt_boxes: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Anchor-relative deltas (dx, dy, dw, dh): center shift over anchor size,
    log-space width/height ratios."""
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    an = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    aw, ah = an[:, 2] - an[:, 0], an[:, 3] - an[:, 1]
    acx, acy = an[:, 0] + 0.5 * aw, an[:, 1] + 0.5 * ah
    gw, gh = gt[:, 2] - gt[:, 0], gt[:, 3] - gt[:, 1]
    gcx, gcy = gt[:, 0] + 0.5 * gw, gt[:, 1] + 0.5 * gh
    return np.stack(
        [(gcx - acx) / aw, (gcy - acy) / ah, np.log(gw / aw), np.log(gh / ah)], axis=1
    )


def decode_boxes(deltas: np.ndarray, anchors: np.ndarray, image_size: float) -> np.ndarray:
    """Inverse of `encode_boxes`, with log scales clamped and output clipped to
    the image."""
    dl = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    an = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    aw, ah = an[:, 2] - an[:, 0], an[:, 3] - an[:, 1]
    acx, acy = an[:, 0] + 0.5 * aw, an[:, 1] + 0.5 * ah
    cx = acx + dl[:, 0] * aw
    cy = acy + dl[:, 1] * ah
    w = aw * np.exp(np.clip(dl[:, 2], -MAX_LOG_SCALE, MAX_LOG_SCALE))
    h = ah * np.exp(np.clip(dl[:, 3], -MAX_LOG_SCALE, MAX_LOG_SCALE))
    boxes = np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)
    return np.clip(boxes, 0.0, image_size)

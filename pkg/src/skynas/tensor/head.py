"""Two-anchor YOLO-style single-box detection head.

Head tensor layout: channel ``5 * a + k`` for anchor ``a`` and
``k`` in (tx, ty, tw, th, objectness). Offsets and objectness go through a
sigmoid, sizes scale the anchor prior by ``exp``. Anchors are (w, h) in
normalized image units.
"""
import numpy as np

from ..boxes import Box
from .ops import ShapeError

NUM_ANCHORS = 2
VALUES_PER_ANCHOR = 5
HEAD_CHANNELS = NUM_ANCHORS * VALUES_PER_ANCHOR
LOGIT_CLIP = 20.0


def sigmoid(z):
    z = np.clip(z, -60.0, 60.0)
    return 1.0 / (1.0 + np.exp(-z))


def _split(y):
    if y.shape[1] != HEAD_CHANNELS:
        raise ShapeError(f"detection head needs {HEAD_CHANNELS} channels, got shape {y.shape}")
    B, _, Gh, Gw = y.shape
    return y.reshape(B, NUM_ANCHORS, VALUES_PER_ANCHOR, Gh, Gw)


def decode_all(y, anchors):
    """Decode every (anchor, cell) candidate.

    Returns ``(boxes, scores)`` with boxes shaped (B, A, Gh, Gw, 4) as
    (cx, cy, w, h) and scores (B, A, Gh, Gw) as sigmoid objectness.
    """
    t = _split(y)
    B, A, _, Gh, Gw = t.shape
    anchors = np.asarray(anchors, dtype=np.float64).reshape(A, 2)
    cols = np.arange(Gw)[None, None, None, :]
    rows = np.arange(Gh)[None, None, :, None]
    cx = (cols + sigmoid(t[:, :, 0])) / Gw
    cy = (rows + sigmoid(t[:, :, 1])) / Gh
    w = anchors[None, :, 0, None, None] * np.exp(np.clip(t[:, :, 2], -LOGIT_CLIP, LOGIT_CLIP))
    h = anchors[None, :, 1, None, None] * np.exp(np.clip(t[:, :, 3], -LOGIT_CLIP, LOGIT_CLIP))
    return np.stack([cx, cy, w, h], axis=-1), sigmoid(t[:, :, 4])


def decode_batch(y, anchors):
    """Highest-objectness box per image as an (B, 4) array of corners in [0, 1].

    Candidates are ranked in (row, col, anchor) order; ties keep the first.
    """
    boxes, scores = decode_all(y, anchors)
    B = y.shape[0]
    # (B, Gh, Gw, A) so the flat index runs row, col, anchor
    s = scores.transpose(0, 2, 3, 1).reshape(B, -1)
    bx = boxes.transpose(0, 2, 3, 1, 4).reshape(B, -1, 4)
    best = np.argmax(s, axis=1)
    cx, cy, w, h = bx[np.arange(B), best].T
    out = np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)
    return np.clip(out, 0.0, 1.0)


def detection_head_decode(y, anchors):
    """Single best box for a one-image head output (``(1, 10, Gh, Gw)`` or ``(10, Gh, Gw)``)."""
    if y.ndim == 3:
        y = y[None]
    if y.ndim != 4 or y.shape[0] != 1:
        raise ShapeError(f"expected a single-image head tensor, got shape {y.shape}")
    return Box(*(float(v) for v in decode_batch(y, anchors)[0]))


def shape_iou(w1, h1, w2, h2):
    inter = np.minimum(w1, w2) * np.minimum(h1, h2)
    return inter / (w1 * h1 + w2 * h2 - inter)


def yolo_loss(y, gt, anchors, coord_weight=5.0, noobj_weight=0.5):
    """Single-object YOLO loss and its gradient w.r.t. the head tensor.

    ``gt`` is (B, 4) normalized corners. The responsible anchor sits in the
    cell holding the box center and has the best shape IoU with the box; it
    gets squared error on (x, y, sqrt w, sqrt h) plus objectness BCE with
    target 1, every other candidate gets objectness BCE with target 0 scaled
    by ``noobj_weight``. The loss is averaged over the batch.
    """
    t = _split(y)
    B, A, _, Gh, Gw = t.shape
    anchors = np.asarray(anchors, dtype=np.float64).reshape(A, 2)
    gt = np.asarray(gt, dtype=np.float64)
    gcx = (gt[:, 0] + gt[:, 2]) / 2
    gcy = (gt[:, 1] + gt[:, 3]) / 2
    gw = np.maximum(gt[:, 2] - gt[:, 0], 1e-9)
    gh = np.maximum(gt[:, 3] - gt[:, 1], 1e-9)
    col = np.minimum((gcx * Gw).astype(int), Gw - 1)
    row = np.minimum((gcy * Gh).astype(int), Gh - 1)
    ious = shape_iou(gw[:, None], gh[:, None], anchors[None, :, 0], anchors[None, :, 1])
    anc = np.argmax(ious, axis=1)
    bi = np.arange(B)

    grad = np.zeros_like(t)
    # objectness: BCE with logits over every candidate
    z = t[:, :, 4]
    target = np.zeros_like(z)
    target[bi, anc, row, col] = 1.0
    weight = np.full_like(z, noobj_weight)
    weight[bi, anc, row, col] = 1.0
    bce = np.logaddexp(0.0, z) - target * z
    loss = float((weight * bce).sum())
    grad[:, :, 4] = weight * (sigmoid(z) - target)

    # coordinates of the responsible candidate
    tx, ty, tw, th = (t[bi, anc, k, row, col] for k in range(4))
    sx, sy = sigmoid(tx), sigmoid(ty)
    ex = gcx * Gw - col
    ey = gcy * Gh - row
    aw, ah = anchors[anc, 0], anchors[anc, 1]
    tw_c = np.clip(tw, -LOGIT_CLIP, LOGIT_CLIP)
    th_c = np.clip(th, -LOGIT_CLIP, LOGIT_CLIP)
    rw = np.sqrt(aw) * np.exp(tw_c / 2)
    rh = np.sqrt(ah) * np.exp(th_c / 2)
    dx, dy = sx - ex, sy - ey
    dw, dh = rw - np.sqrt(gw), rh - np.sqrt(gh)
    loss += coord_weight * float((dx**2 + dy**2 + dw**2 + dh**2).sum())
    grad[bi, anc, 0, row, col] = coord_weight * 2 * dx * sx * (1 - sx)
    grad[bi, anc, 1, row, col] = coord_weight * 2 * dy * sy * (1 - sy)
    grad[bi, anc, 2, row, col] = coord_weight * dw * rw * (np.abs(tw) < LOGIT_CLIP)
    grad[bi, anc, 3, row, col] = coord_weight * dh * rh * (np.abs(th) < LOGIT_CLIP)
    return loss / B, grad.reshape(y.shape) / B


def kmeans_anchors(wh, k=NUM_ANCHORS, iters=100):
    """k-means over box (w, h) pairs with 1 - shape IoU as the distance.

    Initialized at evenly spaced area quantiles so the result is deterministic.
    Returned anchors are sorted by area.
    """
    wh = np.asarray(wh, dtype=np.float64)
    if len(wh) < k:
        raise ValueError(f"need at least {k} boxes to fit {k} anchors, got {len(wh)}")
    order = np.argsort(wh[:, 0] * wh[:, 1], kind="stable")
    qs = ((np.arange(k) + 0.5) / k * len(wh)).astype(int)
    centers = wh[order[qs]].copy()
    for _ in range(iters):
        iou = shape_iou(wh[:, None, 0], wh[:, None, 1], centers[None, :, 0], centers[None, :, 1])
        assign = np.argmax(iou, axis=1)
        new = np.array(
            [wh[assign == j].mean(axis=0) if np.any(assign == j) else centers[j] for j in range(k)]
        )
        if np.allclose(new, centers):
            break
        centers = new
    return centers[np.argsort(centers[:, 0] * centers[:, 1], kind="stable")]

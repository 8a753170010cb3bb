"""Region scoring, caption assignment with class-agnostic NMS, and COCO-style mAP."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..errors import ContractError

log = logging.getLogger(__name__)

IOU_THRESHOLDS = np.round(0.5 + 0.05 * np.arange(10), 2)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass(frozen=True)
class Detection:
    box: tuple[float, float, float, float]
    caption: int
    score: float

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise ContractError("detection score must be finite")


def iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union) if union > 0 else 0.0


def score_regions(region_feats, caption_embeds) -> np.ndarray:
    """Cosine similarity of every (region, caption) pair; zero-norm rows score 0."""
    r = np.atleast_2d(np.asarray(region_feats, dtype=np.float64))
    c = np.atleast_2d(np.asarray(caption_embeds, dtype=np.float64))
    if r.shape[1] != c.shape[1]:
        raise ContractError(f"region dim {r.shape[1]} != caption dim {c.shape[1]}")
    rn = np.linalg.norm(r, axis=1)
    cn = np.linalg.norm(c, axis=1)
    if (rn == 0).any() or (cn == 0).any():
        log.warning("zero-norm feature in region scoring; affected pairs score 0")
    denom = np.outer(rn, cn)
    raw = r @ c.T
    return np.divide(raw, denom, out=np.zeros_like(raw), where=denom > 0)


def nms(boxes, scores, iou_threshold: float = 0.5) -> list[int]:
    """Greedy suppression by descending score; returns kept indices in that order."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    kept: list[int] = []
    for i in order:
        if all(iou(boxes[i], boxes[j]) <= iou_threshold for j in kept):
            kept.append(i)
    return kept


def assign_and_nms(sims, boxes, iou_threshold: float = 0.5) -> list[Detection]:
    """Label each region with its best caption, then suppress overlaps ignoring labels."""
    if not 0.0 < iou_threshold < 1.0:
        raise ContractError("iou_threshold must lie in (0, 1)")
    sims = np.atleast_2d(np.asarray(sims, dtype=np.float64))
    if len(boxes) == 0 or sims.size == 0:
        return []
    labels = sims.argmax(axis=1)
    scores = sims[np.arange(len(labels)), labels]
    keep = nms(boxes, list(scores), iou_threshold)
    return [Detection(tuple(float(v) for v in boxes[i]), int(labels[i]), float(scores[i])) for i in keep]


def average_precision(tp: np.ndarray, n_gt: int) -> float:
    """101-point interpolated AP from a score-sorted true-positive indicator."""
    if n_gt == 0:
        raise ContractError("AP undefined without ground truth")
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1 - tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    vals = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(vals.mean())


def ap_per_threshold(dets: Sequence[Sequence[Detection]], gts: Sequence[Sequence[tuple]]) -> dict[float, float] | None:
    """AP at each IoU threshold, averaged over the caption labels that have ground truth.

    ``gts[i]`` lists ``(box, caption)`` pairs for image ``i``.  Detections are
    matched greedily in descending score order to the best-overlapping
    unmatched ground truth with the same caption.
    """
    if len(dets) != len(gts):
        raise ContractError("detections and ground truths must cover the same images")
    labels = sorted({lab for g in gts for _, lab in g})
    if not labels:
        return None
    flat = [(d.score, img, k, d) for img, ds in enumerate(dets) for k, d in enumerate(ds)]
    flat.sort(key=lambda t: (-t[0], t[1], t[2]))
    out = {}
    for thr in IOU_THRESHOLDS:
        aps = []
        for lab in labels:
            n_gt = sum(1 for g in gts for _, gl in g if gl == lab)
            used = [np.zeros(len(g), dtype=bool) for g in gts]
            tp = []
            for _, img, _, d in flat:
                if d.caption != lab:
                    continue
                best, best_j = -1.0, -1
                for j, (gb, gl) in enumerate(gts[img]):
                    if gl != lab or used[img][j]:
                        continue
                    o = iou(d.box, gb)
                    if o >= thr and o > best:
                        best, best_j = o, j
                if best_j >= 0:
                    used[img][best_j] = True
                    tp.append(1)
                else:
                    tp.append(0)
            aps.append(average_precision(np.asarray(tp, dtype=np.float64), n_gt))
        out[float(thr)] = float(np.mean(aps))
    return out


def coco_map(dets: Sequence[Sequence[Detection]], gts: Sequence[Sequence[tuple]]) -> float | None:
    """Mean AP over IoU thresholds 0.50:0.05:0.95; ``None`` when nothing is annotated."""
    per = ap_per_threshold(dets, gts)
    if per is None:
        return None
    aps = list(per.values())
    # greedy matching can in rare cases break monotonicity in the threshold; flag it
    rises = [t for t, a, b in zip(list(per)[1:], aps, aps[1:]) if b > a + 1e-12]
    if rises:
        log.warning("AP rises with the IoU threshold at %s", rises)
    return float(np.mean(aps))

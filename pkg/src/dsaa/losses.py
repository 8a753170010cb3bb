"""Training objectives: classification (BCE + InfoNCE), matched detection, attribute contrast."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError


@dataclass
class LossWeights:
    lambda_det: float = 1.0
    lambda_attr: float = 0.5
    alpha_nce: float = 1.0
    tau_cls: float = 0.1
    tau_attr: float = 0.1
    det_warmup_steps: int = 500

    def __post_init__(self):
        if self.tau_cls <= 0 or self.tau_attr <= 0:
            raise ContractError("temperatures must be positive")
        if self.lambda_attr < 0 or self.lambda_det < 0:
            raise ContractError("loss weights must be non-negative")
        if self.det_warmup_steps < 0:
            raise ContractError("det_warmup_steps must be non-negative")


def bce_loss(logits, targets) -> Tensor:
    """Mean binary cross-entropy on logits, in the overflow-free softplus form."""
    logits = ad.as_tensor(logits)
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise ContractError(f"logits {logits.shape} and targets {t.shape} differ in shape")
    if not np.all((t == 0) | (t == 1)):
        raise ContractError("BCE targets must be 0 or 1")
    if logits.size == 0:
        return Tensor(0.0)
    return ad.mean(ad.softplus(logits) - logits * t)


def info_nce(sims, tau: float) -> Tensor:
    """Row-wise softmax cross-entropy with the diagonal as the matching column."""
    if tau <= 0:
        raise ContractError("tau must be positive")
    s = ad.as_tensor(sims)
    n = s.shape[0]
    if s.ndim != 2 or s.shape[1] != n:
        raise ContractError(f"similarities must be square, got {s.shape}")
    logp = ad.log_softmax(s * (1.0 / tau), axis=1)
    diag = ad.getitem(logp, (np.arange(n), np.arange(n)))
    return -ad.mean(diag)


def cls_loss(logits, targets, sims, lw: LossWeights) -> Tensor:
    return bce_loss(logits, targets) + lw.alpha_nce * info_nce(sims, lw.tau_cls)


# ---------------------------------------------------------------------------
# Hungarian assignment


def _hungarian_rows(cost: np.ndarray) -> np.ndarray:
    """Shortest-augmenting-path Hungarian method for n <= m; returns column of each row."""
    n, m = cost.shape
    INF = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)  # p[j]: row (1-based) assigned to column j
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, INF)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = INF
            j1 = -1
            for j in range(1, m + 1):
                if used[j]:
                    continue
                cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    cols = np.full(n, -1, dtype=np.int64)
    for j in range(1, m + 1):
        if p[j]:
            cols[p[j] - 1] = j - 1
    return cols


def _min_cost(cost: np.ndarray) -> float:
    if cost.shape[0] == 0 or cost.shape[1] == 0:
        return 0.0
    if cost.shape[0] > cost.shape[1]:
        cost = cost.T
    cols = _hungarian_rows(cost)
    return float(cost[np.arange(cost.shape[0]), cols].sum())


def hungarian_match(cost) -> list[tuple[int, int]]:
    """Minimum-cost assignment of min(n, m) (pred, gt) pairs.

    Among optimal assignments the lexicographically smallest pair list is
    returned: rows are fixed in order, each to the lowest column that still
    admits an optimal completion.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ContractError(f"cost must be a matrix, got shape {cost.shape}")
    if np.isnan(cost).any():
        raise ContractError("cost matrix contains NaN")
    if not np.isfinite(cost).all():
        raise ContractError("cost matrix must be finite")
    n, m = cost.shape
    if n == 0 or m == 0:
        return []
    best = _min_cost(cost)
    tol = 1e-9 * max(1.0, np.abs(cost).max() * min(n, m))
    rows = list(range(n))
    cols = list(range(m))
    pairs = []
    remaining = best
    need = min(n, m)
    for i in range(n):
        if len(pairs) == need:
            break
        sub_rows = [r for r in rows if r != i]
        # row i may stay unassigned when n > m
        options = []
        for j in cols:
            rest = cost[np.ix_(sub_rows, [c for c in cols if c != j])]
            options.append((j, cost[i, j] + _min_cost(rest)))
        if n - i > need - len(pairs):
            skip = _min_cost(cost[np.ix_(sub_rows, cols)])
        else:
            skip = np.inf
        chosen = next((j for j, total in options if total <= remaining + tol), None)
        if chosen is None:
            if skip > remaining + tol:
                chosen = min(options, key=lambda o: o[1])[0]
            else:
                rows.remove(i)
                continue
        pairs.append((i, chosen))
        remaining -= cost[i, chosen]
        rows.remove(i)
        cols.remove(chosen)
    return pairs


# ---------------------------------------------------------------------------
# detection


def box_l1(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Pairwise mean absolute coordinate difference, shape [n, m]."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 4)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
    return np.abs(pred[:, None, :] - gt[None, :, :]).mean(axis=-1)


@dataclass
class DetTerms:
    loc: Tensor
    cls: Tensor
    pairs: list[tuple[int, int]]

    @property
    def total(self) -> Tensor:
        return self.loc + self.cls


def det_loss(pred_boxes, pred_logits, gt_boxes, lw: LossWeights | None = None) -> DetTerms:
    """Hungarian-matched detection loss: mean-L1 box regression plus matched BCE.

    Matching cost is the mean-L1 box distance plus ``1 - sigmoid(logit)``.
    Matched predictions target 1, the rest 0.  Ground truths left without a
    prediction contribute a logit-0 positive term each.
    """
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    boxes = ad.as_tensor(pred_boxes)
    logits = ad.as_tensor(pred_logits)
    n, m = logits.shape[0] if logits.ndim else 0, gt_boxes.shape[0]
    if n == 0:
        missing = m * np.log(2.0) / max(m, 1)
        return DetTerms(Tensor(0.0), Tensor(missing), [])
    cost = box_l1(boxes.data, gt_boxes) + (1.0 - 1.0 / (1.0 + np.exp(-logits.data)))[:, None]
    pairs = hungarian_match(cost) if m else []
    targets = np.zeros(n)
    if pairs:
        pi = np.array([p for p, _ in pairs])
        gi = np.array([g for _, g in pairs])
        targets[pi] = 1.0
        diff = ad.absolute(ad.getitem(boxes.reshape(n, 4), pi) - gt_boxes[gi])
        loc = ad.mean(diff)
    else:
        loc = Tensor(0.0)
    per_pred = ad.softplus(logits) - logits * targets
    unmatched_gt = m - len(pairs)
    cls = (ad.tsum(per_pred) + unmatched_gt * np.log(2.0)) * (1.0 / (n + unmatched_gt))
    return DetTerms(loc, cls, pairs)


# ---------------------------------------------------------------------------
# attribute-aware contrast


@dataclass
class AttrLogitSet:
    positives: Tensor  # [M]
    negatives: Tensor  # [M, K]
    neg_mask: np.ndarray  # [M, K] bool, True where a negative exists

    @classmethod
    def from_lists(cls, positives: Sequence[float], negatives: Sequence[Sequence[float]]) -> "AttrLogitSet":
        if len(positives) != len(negatives):
            raise ContractError("positives and negatives must be parallel lists")
        M = len(positives)
        K = max((len(n) for n in negatives), default=0)
        neg = np.zeros((M, K))
        mask = np.zeros((M, K), dtype=bool)
        for i, row in enumerate(negatives):
            neg[i, : len(row)] = row
            mask[i, : len(row)] = True
        return cls(Tensor(np.asarray(positives, dtype=np.float64)), Tensor(neg), mask)


def attr_contrastive(logits: AttrLogitSet, tau: float) -> Tensor:
    if tau <= 0:
        raise ContractError("tau must be positive")
    M = logits.positives.shape[0]
    if M == 0:
        return Tensor(0.0)
    pos = ad.reshape(logits.positives, (M, 1)) * (1.0 / tau)
    if logits.negatives.shape[1] == 0:
        row = pos
    else:
        neg = ad.masked_fill(logits.negatives * (1.0 / tau), ~logits.neg_mask, -np.inf)
        row = ad.concat([pos, neg], axis=1)
    lse = ad.logsumexp(row, axis=1)
    return ad.mean(lse - ad.reshape(row[:, 0], (M,)))


def det_gate_open(lw: LossWeights, step: int) -> bool:
    if step < 0:
        raise ContractError("step must be non-negative")
    return step >= lw.det_warmup_steps


def total_loss(parts: dict, lw: LossWeights, step: int) -> Tensor:
    """``cls + lambda_attr * attr``, plus ``lambda_det * det`` once the warm-up gate opens."""
    loss = ad.as_tensor(parts["cls"]) + lw.lambda_attr * ad.as_tensor(parts.get("attr", 0.0))
    if det_gate_open(lw, step) and "det" in parts:
        loss = loss + lw.lambda_det * ad.as_tensor(parts["det"])
    return loss

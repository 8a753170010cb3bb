"""Evaluation protocol: score proposals against candidate captions, assign, suppress, score per subset."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .metrics import Detection, assign_and_nms, coco_map, score_regions
from .world import SUBSETS, SyntheticWorld

COLUMNS = ("Hard", "Medium", "Easy", "Trivial", "Color", "Material", "Pattern", "Transp.")
_COLUMN_SUBSET = dict(zip(COLUMNS, SUBSETS))

Scorer = Callable[[dict], np.ndarray]


def candidate_captions(item: dict) -> list[str]:
    rec = item["record"]
    return [rec["positive"], *rec["negatives"]]


def pipeline_scorer(pipeline, world: SyntheticWorld, items: Sequence[dict]) -> Scorer:
    """Region-caption cosine scores through ``pipeline``; caption embeddings are computed up front."""
    pipeline.embed_texts(sorted({c for it in items for c in candidate_captions(it)}))

    def score(item: dict) -> np.ndarray:
        feats = world.project([p["feature"] for p in item["scene"]["proposals"]])
        return score_regions(feats, pipeline.embed_texts(candidate_captions(item)))

    return score


def oracle_scorer(item: dict) -> np.ndarray:
    """1 for the positive caption on the exact target box, 0 everywhere else."""
    scene = item["scene"]
    target = scene["objects"][scene["target"]]["box"]
    props = scene["proposals"]
    sims = np.zeros((len(props), 1 + len(item["record"]["negatives"])))
    for i, p in enumerate(props):
        if p["object"] == scene["target"] and p["box"] == target:
            sims[i, 0] = 1.0
    return sims


def adversarial_scorer(item: dict) -> np.ndarray:
    """Always prefers the first negative caption."""
    n = 1 + len(item["record"]["negatives"])
    sims = np.zeros((len(item["scene"]["proposals"]), n))
    if n > 1:
        sims[:, 1] = 1.0
    return sims


def detect(item: dict, scorer: Scorer, iou_threshold: float = 0.5) -> list[Detection]:
    boxes = [p["box"] for p in item["scene"]["proposals"]]
    return assign_and_nms(scorer(item), boxes, iou_threshold)


def ground_truth(item: dict) -> list[tuple]:
    scene = item["scene"]
    return [(scene["objects"][scene["target"]]["box"], 0)]


@dataclass
class EvalReport:
    columns: dict[str, float | None]
    average: float | None
    meta: dict = field(default_factory=dict)

    def row(self) -> list[float | None]:
        return [self.columns.get(c) for c in COLUMNS] + [self.average]

    def to_json(self) -> dict:
        return {"columns": {c: self.columns.get(c) for c in COLUMNS}, "average": self.average, "meta": self.meta}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=1)


def run_protocol(
    items: Sequence[dict],
    scorer: Scorer,
    iou_threshold: float = 0.5,
    workers: int = 1,
    meta: dict | None = None,
) -> EvalReport:
    """mAP per subset column (``None`` for empty subsets) plus their mean."""
    items = list(items)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            dets = list(pool.map(lambda it: detect(it, scorer, iou_threshold), items))
    else:
        dets = [detect(it, scorer, iou_threshold) for it in items]
    columns: dict[str, float | None] = {}
    for col in COLUMNS:
        subset = _COLUMN_SUBSET[col]
        idx = [i for i, it in enumerate(items) if it["subset"] == subset]
        columns[col] = coco_map([dets[i] for i in idx], [ground_truth(items[i]) for i in idx]) if idx else None
    present = [v for v in columns.values() if v is not None]
    average = float(np.mean(present)) if present else None
    return EvalReport(columns, average, dict(meta or {}, iou_threshold=iou_threshold))

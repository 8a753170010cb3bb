"""Attribute-suppression and feature-separation analyses, and report files."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ContractError, TruncationError
from .fgovd.protocol import COLUMNS, EvalReport
from .text import tokenize

log = logging.getLogger(__name__)

# Full-scale reference values from a pretrained detector (pooled-text cosine distances).
# They document the direction of the effect only and are never targets here.
REFERENCE_SUPPRESSION = {
    "Neutral Category": {"Baseline": 0.2302, "DSAA": 0.3401},
    "Explicit Category": {"Baseline": 0.1347, "DSAA": 0.3360},
}
REFERENCE_SEPARATION_GAIN = 0.302

HIST_BINS = 30
GROUPS = ("Neutral Category", "Explicit Category")


def cosine_distance(a, b) -> float:
    """1 - cosine similarity, in [0, 2]; 1 when either vector is zero."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 1.0
    return float(np.clip(1.0 - (a @ b) / (na * nb), 0.0, 2.0))


@dataclass
class PromptGroupSpec:
    neutral_nouns: list[str] = field(default_factory=lambda: ["object", "item", "thing"])
    explicit_nouns: list[str] = field(default_factory=lambda: ["dog", "chair", "plate"])
    attribute_pairs: list[tuple[str, str]] = field(
        default_factory=lambda: [("green", "black"), ("red", "blue"), ("white", "yellow"), ("wooden", "metal")]
    )

    def __post_init__(self):
        if not self.neutral_nouns or not self.explicit_nouns:
            raise ContractError("both noun groups need at least one noun")
        self.attribute_pairs = [tuple(p) for p in self.attribute_pairs]
        if len(set(self.attribute_pairs)) != len(self.attribute_pairs):
            raise ContractError("attribute pairs must be distinct")
        if any(a == b for a, b in self.attribute_pairs):
            raise ContractError("an attribute pair must contrast two different attributes")


@dataclass
class SuppressionReport:
    group_means: dict[str, float | None]
    distances: dict[str, list[dict]]
    skipped: int = 0
    representation: str = "pooled final hidden state"

    def to_json(self) -> dict:
        return {
            "group_means": self.group_means,
            "distances": self.distances,
            "skipped": self.skipped,
            "representation": self.representation,
        }


def _encodable(pipeline, text: str) -> bool:
    try:
        toks = tokenize(pipeline.vocab, text, pipeline.enc_cfg.max_len)
    except TruncationError:
        return False
    return bool(toks.ids) and pipeline.vocab.unk_id not in toks.ids


def suppression_metric(pipeline, spec: PromptGroupSpec) -> SuppressionReport:
    """Mean cosine distance between "{a} {noun}" and "{b} {noun}" per noun group."""
    distances: dict[str, list[dict]] = {g: [] for g in GROUPS}
    skipped = 0
    for group, nouns in zip(GROUPS, (spec.neutral_nouns, spec.explicit_nouns)):
        for a, b in spec.attribute_pairs:
            for noun in nouns:
                pa, pb = f"{a} {noun}", f"{b} {noun}"
                if not (_encodable(pipeline, pa) and _encodable(pipeline, pb)):
                    skipped += 1
                    continue
                ea, eb = pipeline.embed_texts([pa, pb])
                distances[group].append({"pair": [a, b], "noun": noun, "distance": cosine_distance(ea, eb)})
    means = {g: (float(np.mean([d["distance"] for d in v])) if v else None) for g, v in distances.items()}
    if skipped:
        log.warning("suppression metric skipped %d prompt pair(s) that do not tokenize cleanly", skipped)
    return SuppressionReport(means, distances, skipped)


@dataclass
class SeparationStats:
    positive: list[float]
    negative: list[float]

    @property
    def positive_mean(self) -> float:
        return float(np.mean(self.positive)) if self.positive else float("nan")

    @property
    def negative_mean(self) -> float:
        return float(np.mean(self.negative)) if self.negative else float("nan")

    @property
    def gap(self) -> float:
        """Relative separation (negative mean - positive mean) / positive mean."""
        p, n = self.positive_mean, self.negative_mean
        if p == 0:
            return float("inf") if n > 0 else 0.0
        return (n - p) / p

    def to_json(self) -> dict:
        return {
            "positive_mean": self.positive_mean,
            "negative_mean": self.negative_mean,
            "gap": self.gap,
            "n_positive": len(self.positive),
            "n_negative": len(self.negative),
        }


def separation_from_embeddings(regions, positives, negatives: Sequence[Sequence]) -> SeparationStats:
    """Distances region->positive caption and region->each negative caption."""
    pos = [cosine_distance(r, p) for r, p in zip(regions, positives)]
    neg = [cosine_distance(r, n) for r, negs in zip(regions, negatives) for n in negs]
    return SeparationStats(pos, neg)


def separation_stats(pipeline, world, items: Sequence[dict]) -> SeparationStats:
    regions, positives, negatives = [], [], []
    for it in items:
        scene = it["scene"]
        target = scene["objects"][scene["target"]]["box"]
        feat = next(p["feature"] for p in scene["proposals"] if p["object"] == scene["target"] and p["box"] == target)
        regions.append(world.project(feat))
        rec = it["record"]
        positives.append(pipeline.embed_texts([rec["positive"]])[0])
        negatives.append(list(pipeline.embed_texts(rec["negatives"])))
    return separation_from_embeddings(regions, positives, negatives)


def histogram(values: Sequence[float], bins: int = HIST_BINS, value_range=None) -> tuple[np.ndarray, np.ndarray]:
    values = np.asarray(values, dtype=np.float64)
    if value_range is None:
        value_range = (float(values.min()), float(values.max())) if values.size else (0.0, 1.0)
        if value_range[0] == value_range[1]:
            value_range = (value_range[0] - 0.5, value_range[1] + 0.5)
    counts, edges = np.histogram(values, bins=bins, range=value_range)
    return edges, counts


# ---------------------------------------------------------------------------
# report files


def _fmt(v) -> str:
    return "" if v is None else f"{v:.6f}"


def map_table_csv(reports: Mapping[str, EvalReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant", *COLUMNS, "Average"])
    for name, rep in reports.items():
        w.writerow([name, *(_fmt(v) for v in rep.row())])
    return buf.getvalue()


def suppression_table_csv(reports: Mapping[str, SuppressionReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["category_type", *reports.keys()])
    for g in GROUPS:
        w.writerow([g, *(_fmt(r.group_means.get(g)) for r in reports.values())])
    return buf.getvalue()


def _write(path: Path, text: str) -> None:
    try:
        path.write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write report file {path}: {exc}") from exc


def _separation_figure(path: Path, name: str, stats: SeparationStats, edges: np.ndarray) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "dsaa-report"
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.hist(stats.positive, bins=edges, alpha=0.6, label="positive caption")
    ax.hist(stats.negative, bins=edges, alpha=0.6, label="negative captions")
    ax.set_xlabel("cosine distance to region feature")
    ax.set_ylabel("count")
    ax.set_title(f"{name}: gap {stats.gap:.3f}")
    ax.legend()
    fig.tight_layout()
    try:
        fig.savefig(path, format="svg", metadata={"Date": None})
    except OSError as exc:
        raise OSError(f"cannot write figure {path}: {exc}") from exc
    finally:
        plt.close(fig)


def emit_report(
    out_dir: str | Path,
    eval_reports: Mapping[str, EvalReport] | None = None,
    suppression: Mapping[str, SuppressionReport] | None = None,
    separation: Mapping[str, SeparationStats] | None = None,
    manifest: Mapping | None = None,
) -> list[Path]:
    """Write tables, histograms and a run manifest; returns the written paths.

    Everything except ``manifest.json`` (which carries a timestamp) is a pure
    function of the inputs.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create report directory {out}: {exc}") from exc
    written: list[Path] = []
    if eval_reports:
        p = out / "map_table.csv"
        _write(p, map_table_csv(eval_reports))
        written.append(p)
    if suppression:
        p = out / "suppression.csv"
        _write(p, suppression_table_csv(suppression))
        written.append(p)
        p = out / "suppression_detail.json"
        _write(p, json.dumps({k: v.to_json() for k, v in suppression.items()}, sort_keys=True, indent=1))
        written.append(p)
    if separation:
        summary = {}
        for name, stats in separation.items():
            allv = list(stats.positive) + list(stats.negative)
            edges, _ = histogram(allv)
            _, pc = histogram(stats.positive, value_range=(edges[0], edges[-1]))
            _, nc = histogram(stats.negative, value_range=(edges[0], edges[-1]))
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(["bin_left", "bin_right", "positive_count", "negative_count"])
            for i in range(len(pc)):
                w.writerow([f"{edges[i]:.6f}", f"{edges[i + 1]:.6f}", int(pc[i]), int(nc[i])])
            p = out / f"separation_{name}.csv"
            _write(p, buf.getvalue())
            written.append(p)
            p = out / f"separation_{name}.svg"
            _separation_figure(p, name, stats, edges)
            written.append(p)
            summary[name] = stats.to_json()
        p = out / "separation.json"
        _write(p, json.dumps(summary, sort_keys=True, indent=1))
        written.append(p)
    doc = dict(manifest or {})
    doc["created"] = datetime.now(timezone.utc).isoformat()
    doc["files"] = sorted(p.name for p in written)
    p = out / "manifest.json"
    _write(p, json.dumps(doc, sort_keys=True, indent=1))
    written.append(p)
    return written

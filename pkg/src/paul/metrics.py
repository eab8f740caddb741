"""Retrieval ranking and R@K / AP / SDM@K / Dis@1."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .synth import Tile, compute_iou

SDM_LABEL = "SDM@K (declared formula)"


@dataclass
class RankedResult:
    query_id: int
    order: np.ndarray  # gallery ids, best first
    distances: np.ndarray  # center distance of each ranked candidate


@dataclass
class MetricsReport:
    recall_at: dict
    ap: float
    sdm_at: dict
    dis_at_1: float
    n_queries: int
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        d = asdict(self)
        d["recall_at"] = {str(k): v for k, v in self.recall_at.items()}
        d["sdm_at"] = {str(k): v for k, v in self.sdm_at.items()}
        d["sdm_definition"] = SDM_LABEL
        return json.dumps(d, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        d = json.loads(text)
        d.pop("sdm_definition", None)
        return cls(
            recall_at={int(k): v for k, v in d["recall_at"].items()},
            ap=d["ap"],
            sdm_at={int(k): v for k, v in d["sdm_at"].items()},
            dis_at_1=d["dis_at_1"],
            n_queries=d["n_queries"],
            extra=d.get("extra", {}),
        )

    def row(self) -> dict:
        out = {f"R@{k}": v for k, v in sorted(self.recall_at.items())}
        out["AP"] = self.ap
        out.update({f"SDM@{k}": v for k, v in sorted(self.sdm_at.items())})
        out["Dis@1"] = self.dis_at_1
        out["n_queries"] = self.n_queries
        return out


def rank_by_similarity(sim: np.ndarray, query_centers, gallery_centers) -> list[RankedResult]:
    """Rank gallery columns per query row; ties go to the lower gallery id."""
    sim = np.asarray(sim, dtype=np.float64)
    if sim.shape[1] == 0:
        raise ValueError("gallery is empty")
    qc = np.asarray(query_centers, dtype=np.float64)
    gc = np.asarray(gallery_centers, dtype=np.float64)
    ids = np.arange(sim.shape[1])
    results = []
    for i in range(sim.shape[0]):
        order = np.lexsort((ids, -sim[i]))
        d = np.hypot(*(gc[order] - qc[i]).T)
        results.append(RankedResult(i, order, d))
    return results


def rank(queries: Sequence[Tile], gallery: Sequence[Tile], embed_fn: Callable) -> list[RankedResult]:
    """Exhaustive cosine ranking. ``embed_fn`` maps a list of tiles to unit-norm rows."""
    if len(gallery) == 0:
        raise ValueError("gallery is empty")
    q = embed_fn(list(queries))
    g = embed_fn(list(gallery))
    return rank_by_similarity(q @ g.T, [t.center for t in queries], [t.center for t in gallery])


def ground_truth(queries: Sequence[Tile], gallery: Sequence[Tile]) -> np.ndarray:
    """Gallery id with the largest IoU per query (lowest id on ties)."""
    gt = []
    for q in queries:
        ious = [compute_iou(q, g) for g in gallery]
        gt.append(int(np.argmax(ious)))
    return np.asarray(gt)


def gt_ranks(results: Sequence[RankedResult], gt) -> np.ndarray:
    """1-based rank of each query's ground-truth gallery item."""
    return np.asarray([int(np.flatnonzero(r.order == g)[0]) + 1 for r, g in zip(results, gt)])


def recall_at_k(results, gt, k: int) -> float:
    ranks = gt_ranks(results, gt)
    return float(np.mean(ranks <= k)) if ranks.size else 0.0


def average_precision(results, gt) -> float:
    """Single relevant item per query, so AP is the mean reciprocal rank."""
    ranks = gt_ranks(results, gt)
    return float(np.mean(1.0 / ranks)) if ranks.size else 0.0


def sdm_at_k(results, k: int, scale: float) -> float:
    """Mean over queries of sum_i (k+1-i) exp(-d_i/scale) / sum_i (k+1-i), i = 1..k."""
    if scale <= 0:
        raise ValueError("SDM scale must be positive")
    if not results:
        return 0.0
    scores = []
    for r in results:
        d = r.distances[:k]
        w = (k + 1 - np.arange(1, d.size + 1)).astype(np.float64)
        scores.append(float(np.sum(w * np.exp(-d / scale)) / np.sum(w)))
    return float(np.mean(scores))


def dis_at_1(results) -> float:
    if not results:
        return 0.0
    return float(np.mean([r.distances[0] for r in results]))


def evaluate(
    results: Sequence[RankedResult],
    gt,
    ks: Sequence[int] = (1, 5, 10),
    sdm_ks: Sequence[int] = (3,),
    sdm_scale: float = 64.0,
    extra: dict | None = None,
) -> MetricsReport:
    return MetricsReport(
        recall_at={k: recall_at_k(results, gt, k) for k in ks},
        ap=average_precision(results, gt),
        sdm_at={k: sdm_at_k(results, k, sdm_scale) for k in sdm_ks},
        dis_at_1=dis_at_1(results),
        n_queries=len(results),
        extra=dict(extra or {}),
    )


# -- CSV rows for the report aggregator ------------------------------------------------


def reports_to_csv(rows: Sequence[dict]) -> str:
    """One CSV row per dict; columns are the union of keys in first-seen order."""
    cols: list[str] = []
    for r in rows:
        cols.extend(k for k in r if k not in cols)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: _fmt(r.get(k, "")) for k in cols})
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def csv_to_reports(text: str) -> list[dict]:
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        parsed = {}
        for k, v in row.items():
            parsed[k] = _parse_cell(v)
        out.append(parsed)
    return out


def _parse_cell(v: str):
    if v == "":
        return v
    try:
        return int(v)
    except ValueError:
        pass
    try:
        f = float(v)
        return f if math.isfinite(f) or v.lower() in ("inf", "-inf", "nan") else v
    except ValueError:
        return v

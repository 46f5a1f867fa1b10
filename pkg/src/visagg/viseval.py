"""Video instance segmentation metrics.

Tracks are compared by spatio-temporal IoU: per-frame intersections and unions
are summed over every frame either track covers, then divided. AP follows the
COCO recipe (greedy score-ordered matching, 101-point interpolation) and AR is
the recall reachable with a fixed number of predictions per video.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .structures import InstanceTrack

RECALL_POINTS = np.linspace(0.0, 1.0, 101)


class EmptyBenchmarkError(ValueError):
    """Raised when there is no ground truth to evaluate against."""


def _default_thresholds() -> tuple[float, ...]:
    return tuple(round(0.5 + 0.05 * k, 2) for k in range(10))


@dataclass
class EvalConfig:
    iou_thresholds: Sequence[float] = field(default_factory=_default_thresholds)
    ar_budgets: Sequence[int] = (1, 10)
    categories: Sequence[int] | None = None  # None: every category seen in the ground truth

    def __post_init__(self):
        th = [float(t) for t in self.iou_thresholds]
        if not th:
            raise ValueError("at least one IoU threshold is required")
        if any(b <= a for a, b in zip(th, th[1:])):
            raise ValueError(f"IoU thresholds must be strictly increasing: {th}")
        if th[0] <= 0.0 or th[-1] > 1.0:
            raise ValueError(f"IoU thresholds must lie in (0, 1]: {th}")
        self.iou_thresholds = tuple(th)
        if any(int(k) < 1 for k in self.ar_budgets):
            raise ValueError("AR budgets must be positive")
        self.ar_budgets = tuple(int(k) for k in self.ar_budgets)


@dataclass
class EvalResult:
    categories: list[int]
    thresholds: list[float]
    ap_per_category_per_threshold: np.ndarray  # [K, T]
    mean_ap: float
    ap50: float | None
    ap75: float | None
    ar_per_budget: dict[int, float]

    def headline(self) -> dict[str, float | None]:
        out = {"AP": self.mean_ap, "AP50": self.ap50, "AP75": self.ap75}
        for k, v in self.ar_per_budget.items():
            out[f"AR{k}"] = v
        return out

    def to_dict(self) -> dict:
        return {
            "metrics": self.headline(),
            "categories": self.categories,
            "iou_thresholds": self.thresholds,
            "ap_per_category_per_threshold": self.ap_per_category_per_threshold.tolist(),
        }


def _mask_dict(track: InstanceTrack) -> dict[int, np.ndarray]:
    return {e.frame: np.asarray(e.mask, dtype=bool) for e in track.entries}


def st_iou(a: InstanceTrack, b: InstanceTrack) -> float:
    """Spatio-temporal IoU; frames where a track is absent count as an empty mask."""
    if a.video_id != b.video_id:
        raise ValueError(f"tracks from different videos ({a.video_id} vs {b.video_id})")
    ma, mb = _mask_dict(a), _mask_dict(b)
    inter = union = 0
    for t in set(ma) | set(mb):
        x, y = ma.get(t), mb.get(t)
        if x is None:
            union += int(y.sum())
        elif y is None:
            union += int(x.sum())
        else:
            if x.shape != y.shape:
                raise ValueError(f"frame {t}: mask grids differ {x.shape} vs {y.shape}")
            inter += int(np.logical_and(x, y).sum())
            union += int(np.logical_or(x, y).sum())
    return inter / union if union else 0.0


def _iou_matrix(preds: Sequence[InstanceTrack], gts: Sequence[InstanceTrack]) -> np.ndarray:
    return np.array([[st_iou(p, g) for g in gts] for p in preds]).reshape(len(preds), len(gts))


def _greedy(ious: np.ndarray, threshold: float) -> list[int | None]:
    """Row ``i`` (in score order) takes the free column with the highest IoU >= threshold."""
    taken = np.zeros(ious.shape[1], dtype=bool)
    out: list[int | None] = []
    for row in ious:
        cand = np.where(~taken & (row >= threshold), row, -1.0)
        j = int(np.argmax(cand)) if cand.size else -1
        if cand.size and cand[j] >= 0.0:
            taken[j] = True
            out.append(j)
        else:
            out.append(None)
    return out


def _score_order(preds: Sequence[InstanceTrack]) -> list[int]:
    # stable: ties keep input order
    return sorted(range(len(preds)), key=lambda i: -preds[i].score)


def match_tracks(preds: Sequence[InstanceTrack], gts: Sequence[InstanceTrack], threshold: float,
                 category: int) -> list[tuple[int, int | None]]:
    """Greedy one-to-one matching of same-category tracks within one video.

    Returns ``(pred_index, gt_index or None)`` for each prediction of
    ``category``, in descending score order. Indices refer to the input lists.
    """
    p_idx = [i for i in _score_order(preds) if preds[i].category == category]
    g_idx = [j for j, g in enumerate(gts) if g.category == category]
    ious = _iou_matrix([preds[i] for i in p_idx], [gts[j] for j in g_idx])
    return [(i, None if m is None else g_idx[m]) for i, m in zip(p_idx, _greedy(ious, threshold))]


def interpolated_ap(tp: Sequence[bool], num_gt: int) -> float:
    """101-point interpolated AP from score-ranked TP/FP flags."""
    if num_gt <= 0:
        raise ValueError("AP is undefined without ground truth")
    tp = np.asarray(tp, dtype=bool)
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / num_gt
    precision = ctp / np.arange(1, tp.size + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    pos = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.where(pos < tp.size, envelope[np.minimum(pos, tp.size - 1)], 0.0)
    return float(q.mean())


def _group(tracks: Sequence[InstanceTrack]) -> dict[int, list[InstanceTrack]]:
    out: dict[int, list[InstanceTrack]] = {}
    for t in tracks:
        out.setdefault(t.video_id, []).append(t)
    return out


class _Matcher:
    """Caches per-video, per-category IoU matrices across thresholds and budgets."""

    def __init__(self, preds: Sequence[InstanceTrack], gts: Sequence[InstanceTrack]):
        self.preds, self.gts = _group(preds), _group(gts)
        self._cache: dict = {}

    def video_ids(self) -> list[int]:
        return sorted(set(self.preds) | set(self.gts))

    def num_gt(self, category: int) -> int:
        return sum(g.category == category for gs in self.gts.values() for g in gs)

    def ious(self, vid: int, category: int):
        key = (vid, category)
        if key not in self._cache:
            ps = [p for p in self.preds.get(vid, []) if p.category == category]
            ps = [ps[i] for i in _score_order(ps)]
            gs = [g for g in self.gts.get(vid, []) if g.category == category]
            self._cache[key] = (ps, _iou_matrix(ps, gs))
        return self._cache[key]


def _ap_table(m: _Matcher, cats: list[int], thresholds: Sequence[float]) -> np.ndarray:
    table = np.zeros((len(cats), len(thresholds)))
    for a, c in enumerate(cats):
        n_gt = m.num_gt(c)
        for b, thr in enumerate(thresholds):
            scored = []
            for vid in m.video_ids():
                ps, ious = m.ious(vid, c)
                for p, hit in zip(ps, _greedy(ious, thr)):
                    scored.append((p.score, hit is not None))
            # global rank by score; the sort is stable so per-video order is kept on ties
            scored.sort(key=lambda s: -s[0])
            table[a, b] = interpolated_ap([h for _, h in scored], n_gt)
    return table


def _categories(gts: Sequence[InstanceTrack], config: EvalConfig) -> list[int]:
    present = sorted({g.category for g in gts})
    if config.categories is None:
        return present
    # categories without ground truth are excluded from the averages
    return [c for c in sorted(set(config.categories)) if c in present]


def average_precision(preds: Sequence[InstanceTrack], gts: Sequence[InstanceTrack],
                      config: EvalConfig | None = None) -> EvalResult:
    """AP table plus headline AP values (AR is left empty; see :func:`evaluate`)."""
    config = config or EvalConfig()
    if not gts:
        raise EmptyBenchmarkError("no ground-truth instances to evaluate against")
    cats = _categories(gts, config)
    if not cats:
        raise EmptyBenchmarkError("none of the configured categories has ground truth")
    m = _Matcher(preds, gts)
    table = _ap_table(m, cats, config.iou_thresholds)
    per_thr = table.mean(axis=0)

    def at(x):
        hit = [i for i, t in enumerate(config.iou_thresholds) if abs(t - x) < 1e-9]
        return float(per_thr[hit[0]]) if hit else None

    return EvalResult(categories=cats, thresholds=list(config.iou_thresholds),
                      ap_per_category_per_threshold=table, mean_ap=float(per_thr.mean()),
                      ap50=at(0.5), ap75=at(0.75), ar_per_budget={})


def average_recall(preds: Sequence[InstanceTrack], gts: Sequence[InstanceTrack],
                   config: EvalConfig | None = None) -> dict[int, float]:
    """Recall with the top-``K`` scored predictions kept per video, averaged over thresholds and categories."""
    config = config or EvalConfig()
    if not gts:
        raise EmptyBenchmarkError("no ground-truth instances to evaluate against")
    cats = _categories(gts, config)
    out = {}
    by_video = _group(preds)
    for K in config.ar_budgets:
        kept = []
        for vid in sorted(by_video):
            ps = by_video[vid]
            kept.extend(ps[i] for i in _score_order(ps)[:K])
        m = _Matcher(kept, gts)
        rec = np.zeros((len(cats), len(config.iou_thresholds)))
        for a, c in enumerate(cats):
            n_gt = m.num_gt(c)
            for b, thr in enumerate(config.iou_thresholds):
                hits = sum(h is not None for vid in m.video_ids() for h in _greedy(m.ious(vid, c)[1], thr))
                rec[a, b] = hits / n_gt
        out[K] = float(rec.mean()) if cats else 0.0
    return out


def evaluate(preds: Sequence[InstanceTrack], gts: Sequence[InstanceTrack],
             config: EvalConfig | None = None) -> EvalResult:
    config = config or EvalConfig()
    res = average_precision(preds, gts, config)
    res.ar_per_budget = average_recall(preds, gts, config)
    return res

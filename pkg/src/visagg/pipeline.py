"""Online per-video inference: support sampling, aggregation, heads and tracking."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import detector as det
from .attention import AttentionParams, dual_attention, embed_support, object_dual_attention
from .structures import Box, Frame, InstanceTrack, TrackEntry, VideoAnnotation, box_center
from .tensor import ContractError, Tensor, no_grad, roi_align, stack
from .tracker import (
    TrackerParams,
    TrackState,
    associate,
    correlation_map,
    map_similarity,
    match_logits,
    pairwise_similarity,
)

logger = logging.getLogger(__name__)


@dataclass
class PipelineConfig:
    T_train: int = 2
    T_test: int = 4
    sampling_mode: str = "uniform"  # used at test time
    train_sampling_mode: str = "random"
    seed: int = 0
    proposal_mode: str = "oracle"
    jitter: float = 0.0
    enable_frame_attention: bool = True
    enable_object_attention: bool = True
    enable_correlation_map: bool = True
    memory_horizon: int | None = 10  # None keeps identities alive forever
    strict_causal: bool = False
    association_mode: str = "greedy"
    reference_update: str = "replace"  # or "average"
    motion_prior: bool = True
    refine_boxes: bool = False

    def __post_init__(self):
        if self.T_train < 0 or self.T_test < 0:
            raise ContractError("support counts must be nonnegative")
        if self.memory_horizon is not None and self.memory_horizon < 1:
            raise ContractError("memory_horizon must be >= 1")
        for name, allowed in (("sampling_mode", ("uniform", "random")),
                              ("train_sampling_mode", ("uniform", "random")),
                              ("proposal_mode", ("oracle", "blob")),
                              ("association_mode", ("greedy", "hungarian")),
                              ("reference_update", ("replace", "average"))):
            if getattr(self, name) not in allowed:
                raise ContractError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")

    @classmethod
    def field_names(cls) -> set[str]:
        return {f.name for f in fields(cls)}


@dataclass
class ModelParams:
    detector: det.DetectorParams
    frame_attention: AttentionParams
    object_attention: AttentionParams
    tracker: TrackerParams

    @classmethod
    def init(cls, channels: int = 32, stride: int = 4, num_categories: int = 3, seed: int = 0,
             **tracker_kw) -> "ModelParams":
        return cls(detector=det.DetectorParams.init(channels, stride, num_categories, seed=seed),
                   frame_attention=AttentionParams.init(channels, seed=seed + 1),
                   object_attention=AttentionParams.init(channels, seed=seed + 2),
                   tracker=TrackerParams.init(channels, seed=seed + 3, **tracker_kw))

    def parameters(self) -> list[Tensor]:
        return (self.detector.parameters() + self.frame_attention.parameters()
                + self.object_attention.parameters() + self.tracker.parameters())


# ---------------------------------------------------------------- support sampling


def sample_support(video_len: int, current: int, T: int, mode: str = "uniform",
                   seed: int | np.random.Generator | None = 0, strict_causal: bool = False) -> list[int]:
    """Support frame indices for ``current``.

    Uniform mode spaces ``T`` indices evenly over the eligible range (endpoints
    included) and moves any index that collides with ``current`` or an earlier
    pick to its nearest unused neighbor. Random mode draws ``T`` distinct
    eligible indices. When fewer than ``T`` eligible frames exist, indices
    repeat; a single-frame video supports itself.
    """
    if not 0 <= current < video_len:
        raise ContractError(f"current frame {current} outside video of length {video_len}")
    if T < 0:
        raise ContractError("T must be nonnegative")
    if T == 0:
        return []
    hi = current - 1 if strict_causal else video_len - 1
    eligible = [i for i in range(hi + 1) if i != current]
    if not eligible:
        return [current] * T
    if mode == "random":
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        replace = len(eligible) < T
        return sorted(int(i) for i in rng.choice(eligible, size=T, replace=replace))
    if mode != "uniform":
        raise ContractError(f"unknown sampling mode {mode!r}")
    if len(eligible) <= T:
        reps = [eligible[k % len(eligible)] for k in range(T)]
        return sorted(reps)
    used = {current}
    out = []
    for pos in np.linspace(0, hi, T):
        idx = int(np.floor(pos + 0.5))
        if idx in used:
            for d in range(1, video_len):
                cand = [c for c in (idx - d, idx + d) if 0 <= c <= hi and c not in used]
                if cand:
                    idx = cand[0]
                    break
        used.add(idx)
        out.append(idx)
    return sorted(out)


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([p & 0xFFFFFFFF for p in parts]).generate_state(1)[0])


# ---------------------------------------------------------------- online tracker


@dataclass
class Detection:
    identity: int
    box: Box
    mask: np.ndarray
    category_scores: np.ndarray
    confidence: float
    match_prob: float
    source_id: int | None = None


def native_template(features: Tensor, box: Box, stride: int) -> Tensor:
    """Crop ``features`` inside ``box`` at roughly one cell per feature pixel."""
    fb = det.to_feature_box(box, stride)
    return roi_align(features, fb, max(1, int(round(fb[3]))), max(1, int(round(fb[2]))))


def _sigmoid(x: float) -> float:
    return float(1.0 / (1.0 + np.exp(-x)))


@dataclass
class OnlineTracker:
    """Holds the identity memory of one video while frames arrive in order."""

    config: PipelineConfig
    params: ModelParams
    height: int
    width: int
    tracks: list[TrackState] = field(default_factory=list)
    next_identity: int = 1
    retired: set[int] = field(default_factory=set)
    _feature_cache: dict = field(default_factory=dict)

    def features(self, frame: Frame) -> Tensor:
        key = (frame.video_id, frame.index)
        if key not in self._feature_cache:
            self._feature_cache[key] = det.extract_features(frame, self.params.detector)
        return self._feature_cache[key]

    def process_frame(self, frame: Frame, supports: Sequence[Frame],
                      gt: list[tuple[int, int, Box]] | None = None,
                      rng: np.random.Generator | None = None) -> list[Detection]:
        cfg, prm = self.config, self.params
        with no_grad():
            raw = self.features(frame)
            sup = [self.features(s) for s in supports] or [raw]
            emb_f = embed_support(sup, prm.frame_attention) if cfg.enable_frame_attention else None
            feats = dual_attention(raw, emb_f, prm.frame_attention) if emb_f else raw
            props = det.propose(frame, feats, prm.detector, cfg.proposal_mode, gt=gt,
                                jitter=cfg.jitter, rng=rng)
            P = len(props)
            self._age_out(frame.index)
            if P == 0:
                return []
            rois = stack([p.roi_features for p in props])
            if cfg.enable_object_attention:
                rois = object_dual_attention(rois, sup, prm.object_attention)
            probs, deltas, masks = det.predict_heads(rois, prm.detector)
            for k, p in enumerate(props):
                if cfg.proposal_mode == "blob":
                    p.category_scores = probs.data[k].copy()
                if cfg.refine_boxes:
                    p.box = det.decode_box(p.box, deltas.data[k])
                p.mask_logits = masks.data[k]
            logits = self._match_logits(raw, rois, props, frame.index)
        ids = associate(logits, props, self.tracks, prm.tracker, cfg.association_mode)
        return self._update(frame, raw, rois, props, ids, logits)

    def _match_logits(self, raw: Tensor, rois: Tensor, props, t: int) -> np.ndarray:
        Q, P = len(self.tracks), len(props)
        if Q == 0:
            return np.zeros((0, P))
        prm = self.params
        refs = stack([tr.reference_roi for tr in self.tracks])
        v_pair = pairwise_similarity(rois, refs, prm.tracker)
        v_map = None
        if self.config.enable_correlation_map:
            s = prm.detector.stride
            rows = []
            for tr in self.tracks:
                corr = correlation_map(tr.template, raw, prm.tracker, self._prior_center(tr, t))
                rows.append(stack([map_similarity(corr, det.to_feature_box(p.box, s), prm.tracker)
                                   for p in props]))
            v_map = stack(rows)
        return match_logits(v_pair, v_map, prm.tracker).data

    def _prior_center(self, tr: TrackState, t: int) -> tuple[float, float]:
        cx, cy = box_center(tr.last_box)
        if self.config.motion_prior:
            dt = t - tr.last_frame
            cx, cy = cx + tr.velocity[0] * dt, cy + tr.velocity[1] * dt
        s = self.params.detector.stride
        return cx / s, cy / s

    def _age_out(self, t: int) -> None:
        h = self.config.memory_horizon
        if h is None:
            return
        keep = []
        for tr in self.tracks:
            if t - tr.last_frame > h:
                self.retired.add(tr.identity)
            else:
                keep.append(tr)
        self.tracks = keep

    def _update(self, frame: Frame, raw: Tensor, rois: Tensor, props, ids, logits) -> list[Detection]:
        by_id = {tr.identity: (q, tr) for q, tr in enumerate(self.tracks)}
        K = self.params.detector.num_categories
        stride = self.params.detector.stride
        out = []
        for p, (prop, ident) in enumerate(zip(props, ids)):
            roi = Tensor(rois.data[p].copy())
            template = native_template(raw, prop.box, stride)
            vote = np.zeros(K)
            vote[int(np.argmax(prop.category_scores))] = 1.0
            if ident is None:
                ident = self.next_identity
                self.next_identity += 1
                prob = 1.0
                self.tracks.append(TrackState(identity=ident, reference_roi=roi, last_box=prop.box,
                                              category_votes=vote, last_score=prop.detection_confidence,
                                              last_frame=frame.index, template=template))
            else:
                q, tr = by_id[ident]
                prob = _sigmoid(logits[q, p])
                if self.config.reference_update == "average":
                    roi = Tensor(0.5 * (tr.reference_roi.data + roi.data))
                (ox, oy), (nx, ny) = box_center(tr.last_box), box_center(prop.box)
                dt = max(frame.index - tr.last_frame, 1)
                tr.velocity = ((nx - ox) / dt, (ny - oy) / dt)
                tr.reference_roi, tr.template = roi, template
                tr.last_box, tr.last_frame = prop.box, frame.index
                tr.category_votes = tr.category_votes + vote
                tr.last_score = prop.detection_confidence
            mask = det.paste_mask(prop.mask_logits, prop.box, self.height, self.width)
            out.append(Detection(identity=ident, box=prop.box, mask=mask,
                                 category_scores=prop.category_scores,
                                 confidence=prop.detection_confidence, match_prob=prob,
                                 source_id=prop.source_id))
        return out


def gt_for_frame(ann: VideoAnnotation | None, t: int) -> list[tuple[int, int, Box]] | None:
    if ann is None:
        return None
    return [(inst.identity, inst.category, e.box) for inst, e in ann.objects_in_frame(t)]


def run_video(frames: Sequence[Frame], gt: VideoAnnotation | None, config: PipelineConfig,
              params: ModelParams) -> list[InstanceTrack]:
    """Process frames in index order and assemble one track per identity.

    Track category is the majority vote over its frames; track score is the
    mean over frames of detection confidence times match probability.
    """
    if len(frames) == 0:
        raise ContractError("run_video needs at least one frame")
    H, W = frames[0].size
    vid = frames[0].video_id
    tracker = OnlineTracker(config, params, H, W)
    per_id: dict[int, list[tuple[Detection, int]]] = {}
    for t, frame in enumerate(frames):
        idx = sample_support(len(frames), t, config.T_test, config.sampling_mode,
                             seed=derive_seed(config.seed, vid, t), strict_causal=config.strict_causal)
        rng = np.random.default_rng(derive_seed(config.seed, vid, t, 1))
        dets = tracker.process_frame(frame, [frames[i] for i in idx], gt_for_frame(gt, frame.index), rng)
        for d in dets:
            per_id.setdefault(d.identity, []).append((d, frame.index))
    tracks = []
    for ident in sorted(per_id):
        items = per_id[ident]
        votes = np.bincount([int(np.argmax(d.category_scores)) for d, _ in items],
                            minlength=params.detector.num_categories)
        tr = InstanceTrack(identity=ident, category=int(np.argmax(votes)), video_id=vid,
                           score=float(np.mean([d.confidence * d.match_prob for d, _ in items])))
        for d, t in items:
            tr.add(TrackEntry(frame=t, box=tuple(float(v) for v in d.box), mask=d.mask,
                              score=float(d.confidence * d.match_prob), source_id=d.source_id))
        tracks.append(tr)
    return tracks


def identity_accuracy(tracks: Sequence[InstanceTrack]) -> float:
    """Fraction of detection-frames whose predicted identity maps to their true identity.

    Predicted and true identities are paired one-to-one to maximize agreement,
    so both identity switches and fragmented tracks cost accuracy.
    """
    pairs = [(tr.identity, e.source_id) for tr in tracks for e in tr.entries if e.source_id is not None]
    if not pairs:
        return 0.0
    pred_ids = sorted({p for p, _ in pairs})
    gt_ids = sorted({g for _, g in pairs})
    counts = np.zeros((len(pred_ids), len(gt_ids)))
    for p, g in pairs:
        counts[pred_ids.index(p), gt_ids.index(g)] += 1
    r, c = linear_sum_assignment(counts, maximize=True)
    return float(counts[r, c].sum() / len(pairs))

"""Desk-scale SGD training.

:func:`train` optimizes the joint loss (classification, box, mask, correlation
map, association) over random frame triples. :func:`train_correlation_head`
fits only the two refinement convs against gaussian targets.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import detector as det
from .attention import dual_attention, embed_support, object_dual_attention
from .pipeline import ModelParams, PipelineConfig, native_template, sample_support
from .structures import Frame, VideoAnnotation, box_center
from .tensor import (
    Tensor,
    add,
    concat,
    conv1x1,
    index,
    log_softmax_axis,
    mean,
    mul,
    no_grad,
    relu,
    softplus,
    smooth_l1,
    sgd_step,
    stack,
    tsum,
)
from .tracker import (
    TrackerParams,
    correlation_loss,
    correlation_map,
    displacement_window,
    frame_target,
    map_similarity,
    match_logits,
    pairwise_similarity,
    raw_correlation,
)

logger = logging.getLogger(__name__)

Video = tuple[Sequence[Frame], VideoAnnotation]


class NumericalError(RuntimeError):
    """A loss term became non-finite."""

    def __init__(self, term: str, step: int):
        super().__init__(f"loss term {term!r} is not finite at step {step}")
        self.term = term


@dataclass
class TrainConfig:
    steps: int = 200
    lr: float = 1e-2
    seed: int = 0
    jitter: float = 0.05
    max_ref_gap: int = 3
    weights: dict = field(default_factory=lambda: {
        "cls": 1.0, "box": 1.0, "mask": 1.0, "corr": 1.0, "assoc": 1.0})
    log_every: int = 50


class _FeatureCache:
    def __init__(self, params: ModelParams):
        self.params = params
        self.store: dict = {}

    def __call__(self, frame: Frame) -> Tensor:
        key = (frame.video_id, frame.index)
        if key not in self.store:
            with no_grad():
                self.store[key] = det.extract_features(frame, self.params.detector)
        return self.store[key]


def _objects(ann: VideoAnnotation, t: int):
    return [(inst.identity, inst.category, e) for inst, e in ann.objects_in_frame(t)]


def _velocity(ann: VideoAnnotation, ident: int, t: int) -> tuple[float, float]:
    inst = next(i for i in ann.instances if i.identity == ident)
    now, prev = inst.entry_at(t), inst.entry_at(t - 1)
    if now is None or prev is None:
        return 0.0, 0.0
    (ax, ay), (bx, by) = box_center(prev.box), box_center(now.box)
    return bx - ax, by - ay


def joint_loss(params: ModelParams, cfg: PipelineConfig, frames: Sequence[Frame], ann: VideoAnnotation,
               t: int, r: int, supports: Sequence[int], rng: np.random.Generator,
               feats: _FeatureCache, jitter: float = 0.05) -> dict[str, Tensor]:
    """Loss terms for current frame ``t`` tracked against reference frame ``r``."""
    prm = params
    stride = prm.detector.stride
    raw_t, raw_r = feats(frames[t]), feats(frames[r])
    sup = [feats(frames[i]) for i in supports] or [raw_t]
    if cfg.enable_frame_attention:
        emb = embed_support(sup, prm.frame_attention)
        f_t = dual_attention(raw_t, emb, prm.frame_attention)
        f_r = dual_attention(raw_r, emb, prm.frame_attention)
    else:
        f_t, f_r = raw_t, raw_r

    cur = _objects(ann, t)
    ref = _objects(ann, r)
    terms: dict[str, Tensor] = {}
    boxes = [det._jitter_box(e.box, jitter, rng) for _, _, e in cur]
    rois_t = stack([det.roi_features(f_t, b, prm.detector) for b in boxes])
    rois_r = stack([det.roi_features(f_r, e.box, prm.detector) for _, _, e in ref])
    if cfg.enable_object_attention:
        rois_t = object_dual_attention(rois_t, sup, prm.object_attention)
        rois_r = object_dual_attention(rois_r, sup, prm.object_attention)

    _, deltas, mask_logits = det.predict_heads(rois_t, prm.detector)
    P = len(cur)
    cats = [c for _, c, _ in cur]
    logp = log_softmax_axis(det.class_logits(rois_t, prm.detector), axis=1)
    terms["cls"] = mul(tsum(index(logp, (np.arange(P), np.array(cats)))), -1.0 / P)
    box_t = np.stack([det.encode_box(b, e.box) for b, (_, _, e) in zip(boxes, cur)])
    terms["box"] = mean(smooth_l1(add(deltas, -box_t)))
    m_t = np.stack([det.mask_target(e.mask, b, prm.detector.mask_size) for b, (_, _, e) in zip(boxes, cur)])
    terms["mask"] = mean(add(softplus(mask_logits), mul(mask_logits, -m_t)))

    v_pair = pairwise_similarity(rois_t, rois_r, prm.tracker)
    v_map = None
    if cfg.enable_correlation_map:
        H, W = raw_t.shape[1:]
        rows, losses = [], []
        cur_by_id = {ident: e for ident, _, e in cur}
        for ident, _, e in ref:
            cx, cy = box_center(e.box)
            if cfg.motion_prior:
                vx, vy = _velocity(ann, ident, r)
                cx, cy = cx + vx * (t - r), cy + vy * (t - r)
            corr = correlation_map(native_template(raw_r, e.box, stride), raw_t, prm.tracker,
                                   (cx / stride, cy / stride))
            if ident in cur_by_id:
                tgt = frame_target(det.to_feature_box(cur_by_id[ident].box, stride), H, W,
                                   prm.tracker.sigma_factor)
                losses.append(correlation_loss(corr.likelihood_map, tgt))
            rows.append(stack([map_similarity(corr, det.to_feature_box(b, stride), prm.tracker)
                               for b in boxes]))
        v_map = stack(rows)
        if losses:
            terms["corr"] = mul(tsum(stack(losses)), 1.0 / len(losses))
    logits = match_logits(v_pair, v_map, prm.tracker)  # [Q, P]

    # each detection picks among "new identity" (fixed logit) and every reference
    thr = Tensor(np.full((1, P), prm.tracker.new_identity_threshold))
    scores = concat([thr, logits], axis=0)  # [Q+1, P]
    ref_ids = [ident for ident, _, _ in ref]
    target = np.array([1 + ref_ids.index(ident) if ident in ref_ids else 0 for ident, _, _ in cur])
    ls = log_softmax_axis(scores, axis=0)
    terms["assoc"] = mul(tsum(index(ls, (target, np.arange(P)))), -1.0 / P)
    return terms


def _pick_triple(videos: Sequence[Video], cfg: PipelineConfig, tc: TrainConfig, rng: np.random.Generator):
    for _ in range(100):
        v = int(rng.integers(len(videos)))
        frames, ann = videos[v]
        L = len(frames)
        if L < 2:
            continue
        t = int(rng.integers(L))
        if not _objects(ann, t):
            continue
        gaps = [g for g in range(-tc.max_ref_gap, tc.max_ref_gap + 1) if g and 0 <= t + g < L]
        r = t + int(rng.choice(gaps))
        if not _objects(ann, r):
            continue
        sup = sample_support(L, t, cfg.T_train, cfg.train_sampling_mode, seed=rng)
        return frames, ann, t, r, sup
    raise ValueError("no trainable frame pairs in the dataset")


def train(params: ModelParams, videos: Sequence[Video], cfg: PipelineConfig,
          tc: TrainConfig | None = None) -> list[dict[str, float]]:
    """Plain SGD over the joint loss; returns per-step loss terms."""
    tc = tc or TrainConfig()
    rng = np.random.default_rng(tc.seed)
    feats = _FeatureCache(params)
    plist = params.parameters()
    history = []
    for step in range(tc.steps):
        frames, ann, t, r, sup = _pick_triple(videos, cfg, tc, rng)
        terms = joint_loss(params, cfg, frames, ann, t, r, sup, rng, feats, tc.jitter)
        total = None
        record = {}
        for name, term in terms.items():
            val = term.item()
            if not np.isfinite(val):
                raise NumericalError(name, step)
            record[name] = val
            weighted = mul(term, tc.weights.get(name, 1.0))
            total = weighted if total is None else add(total, weighted)
        total.backward()
        sgd_step(plist, tc.lr)
        record["total"] = float(total.item())
        history.append(record)
        if tc.log_every and step % tc.log_every == 0:
            logger.info("step %d %s", step, {k: round(v, 4) for k, v in record.items()})
    return history


# ---------------------------------------------------------------- correlation head only


@dataclass
class CorrelationSample:
    raw: Tensor  # [C, H, W] correlation volume (no displacement window)
    target: Tensor  # [1, H, W]
    center: tuple[float, float]  # true center, feature-grid index coords (x, y)


def correlation_samples(videos: Sequence[Video], params: ModelParams, sigma_factor: float = 0.25,
                        window_sigma: float | None = None) -> list[CorrelationSample]:
    """Template from frame ``t-1``, search frame ``t``, target at the object's frame-``t`` box."""
    feats = _FeatureCache(params)
    stride = params.detector.stride
    out = []
    with no_grad():
        for frames, ann in videos:
            for t in range(1, len(frames)):
                prev = {i: e for i, _, e in _objects(ann, t - 1)}
                ft = feats(frames[t])
                H, W = ft.shape[1:]
                for ident, _, e in _objects(ann, t):
                    if ident not in prev:
                        continue
                    raw = raw_correlation(native_template(feats(frames[t - 1]), prev[ident].box, stride), ft)
                    if window_sigma is not None:
                        cx, cy = box_center(prev[ident].box)
                        raw = Tensor(raw.data * displacement_window((cx / stride, cy / stride), H, W,
                                                                    window_sigma)[None])
                    fb = det.to_feature_box(e.box, stride)
                    out.append(CorrelationSample(
                        raw=raw, target=frame_target(fb, H, W, sigma_factor),
                        center=(fb[0] + fb[2] / 2 - 0.5, fb[1] + fb[3] / 2 - 0.5)))
    return out


def _refine(raw: Tensor, tp: TrackerParams) -> Tensor:
    return conv1x1(relu(conv1x1(raw, tp.refine_conv_1)), tp.refine_conv_2)


def correlation_set_loss(samples: Sequence[CorrelationSample], tp: TrackerParams) -> float:
    with no_grad():
        return float(np.mean([correlation_loss(_refine(s.raw, tp), s.target).item() for s in samples]))


def train_correlation_head(tp: TrackerParams, samples: Sequence[CorrelationSample], steps: int = 500,
                           lr: float = 0.5, batch: int = 8, seed: int = 0) -> list[float]:
    """SGD on the two refinement convs only; returns per-step minibatch losses."""
    rng = np.random.default_rng(seed)
    plist = tp.refine_conv_1.parameters() + tp.refine_conv_2.parameters()
    history = []
    for step in range(steps):
        pick = rng.choice(len(samples), size=min(batch, len(samples)), replace=False)
        losses = [correlation_loss(_refine(samples[k].raw, tp), samples[k].target) for k in pick]
        loss = mul(tsum(stack(losses)), 1.0 / len(losses))
        if not np.isfinite(loss.item()):
            raise NumericalError("corr", step)
        loss.backward()
        sgd_step(plist, lr)
        history.append(loss.item())
    return history


def localization_hits(samples: Sequence[CorrelationSample], tp: TrackerParams, radius: float = 2.0) -> float:
    """Fraction of samples whose likelihood argmax lies within ``radius`` feature pixels of the center."""
    hits = 0
    with no_grad():
        for s in samples:
            m = _refine(s.raw, tp).data[0]
            y, x = np.unravel_index(int(np.argmax(m)), m.shape)
            hits += np.hypot(x - s.center[0], y - s.center[1]) <= radius
    return hits / len(samples)

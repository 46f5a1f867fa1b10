"""Correlation-based identity tracking.

Two similarity vectors are built for every (track, detection) pair: a
depth-wise correlation of the two ROI volumes, and a pooled descriptor from
the track's correlation map over the whole frame. Their sum goes through a
two-layer score head, and the resulting logits are combined with detection
confidence, box IoU and category consistency during assignment.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .structures import Box, box_iou
from .tensor import (
    ContractError,
    OpParams,
    Tensor,
    broadcast_to,
    conv1x1,
    depthwise_xcorr,
    einsum,
    mean,
    mul,
    relu,
    reshape,
    roi_align,
    sigmoid,
    square,
    sub,
    transpose,
)


@dataclass
class TrackerParams:
    refine_conv_1: OpParams  # C -> 256
    refine_conv_2: OpParams  # 256 -> 1
    pair_proj: OpParams  # C -> 256
    score_conv_1: OpParams  # 256 -> 256
    score_conv_2: OpParams  # 256 -> 1
    new_identity_threshold: float = 0.0
    cue_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    sigma_factor: float = 0.25
    map_pool: str = "refined"  # or "map": pool the 1-channel likelihood instead
    map_grid: int = 3
    # gaussian displacement prior on the correlation volume, in feature pixels; None disables
    window_sigma: float | None = 3.0

    @classmethod
    def init(cls, channels: int = 32, hidden: int = 256, seed: int = 1, **kw) -> "TrackerParams":
        rng = np.random.default_rng(seed)
        return cls(refine_conv_1=OpParams.init(channels, hidden, rng),
                   refine_conv_2=OpParams.init(hidden, 1, rng),
                   pair_proj=OpParams.init(channels, hidden, rng),
                   score_conv_1=OpParams.init(hidden, hidden, rng),
                   score_conv_2=OpParams.init(hidden, 1, rng),
                   **kw)

    @property
    def hidden(self) -> int:
        return self.pair_proj.out_channels

    def parameters(self) -> list[Tensor]:
        return (self.refine_conv_1.parameters() + self.refine_conv_2.parameters()
                + self.pair_proj.parameters() + self.score_conv_1.parameters()
                + self.score_conv_2.parameters())


@dataclass
class TrackState:
    identity: int
    reference_roi: Tensor  # [C, h, w] after object attention
    last_box: Box  # image pixels
    category_votes: np.ndarray
    last_score: float
    last_frame: int
    # native-resolution crop of raw frame features, used as the correlation template
    template: Tensor | None = None
    velocity: tuple[float, float] = (0.0, 0.0)
    match_probs: list[float] = field(default_factory=list)

    @property
    def category(self) -> int:
        return int(np.argmax(self.category_votes))


@dataclass
class CorrelationOutput:
    refined_features: Tensor  # [256, H, W]
    likelihood_map: Tensor  # [1, H, W]
    raw: Tensor  # [C, H, W]


def pair_correlation(det_rois: Tensor, ref_rois: Tensor) -> Tensor:
    """Zero-offset depth-wise correlation of every (ref, det) pair: ``[Q, P, C]``."""
    if det_rois.ndim != 4 or ref_rois.ndim != 4 or det_rois.shape[1:] != ref_rois.shape[1:]:
        raise ContractError(f"ROI volumes disagree: det {det_rois.shape}, ref {ref_rois.shape}")
    return einsum("qcyx,pcyx->qpc", ref_rois, det_rois)


def pairwise_similarity(det_rois: Tensor, ref_rois: Tensor, params: TrackerParams) -> Tensor:
    """``[Q, P, 256]`` projected pairwise correlation vectors."""
    pre = pair_correlation(det_rois, ref_rois)
    proj = conv1x1(transpose(pre, (2, 0, 1)), params.pair_proj)
    return transpose(proj, (1, 2, 0))


def displacement_window(center: tuple[float, float], H: int, W: int, sigma: float) -> np.ndarray:
    """Gaussian prior over feature pixels around an expected center (pixel k centered at k+0.5)."""
    cx, cy = center
    xs = np.arange(W) + 0.5
    ys = np.arange(H) + 0.5
    return np.exp(-((xs[None, :] - cx) ** 2 + (ys[:, None] - cy) ** 2) / (2.0 * sigma ** 2))


def raw_correlation(template: Tensor, frame_features: Tensor) -> Tensor:
    """Padded depth-wise correlation, averaged over template cells so template size does not set the scale."""
    h, w = template.shape[1:]
    return mul(depthwise_xcorr(template, frame_features, pad=True), 1.0 / (h * w))


def correlation_map(ref_roi: Tensor, frame_features: Tensor, params: TrackerParams,
                    prior_center: tuple[float, float] | None = None) -> CorrelationOutput:
    """Object-to-frame correlation refined into features and a 1-channel likelihood map.

    ``prior_center`` (feature pixels) applies the displacement window when
    ``params.window_sigma`` is set.
    """
    if ref_roi.shape[0] != frame_features.shape[0]:
        raise ContractError(
            f"template C={ref_roi.shape[0]} vs frame C={frame_features.shape[0]}")
    raw = raw_correlation(ref_roi, frame_features)
    if prior_center is not None and params.window_sigma is not None:
        H, W = frame_features.shape[1:]
        raw = mul(raw, displacement_window(prior_center, H, W, params.window_sigma)[None])
    refined = relu(conv1x1(raw, params.refine_conv_1))
    return CorrelationOutput(refined, conv1x1(refined, params.refine_conv_2), raw)


def gaussian_target(box: Box, H: int, W: int, sigma_factor: float = 0.25) -> Tensor:
    """2-D gaussian on the integer ``(y, x)`` grid centered at the box center.

    ``sigma_x = sigma_factor * w`` and ``sigma_y = sigma_factor * h``.
    """
    x, y, w, h = box
    if w <= 0 or h <= 0:
        raise ContractError(f"degenerate box {box}")
    if sigma_factor <= 0:
        raise ContractError("sigma_factor must be positive")
    cx, cy = x + w / 2.0, y + h / 2.0
    if not (0 <= cx < W and 0 <= cy < H):
        raise ContractError(f"box center ({cx}, {cy}) outside the {H}x{W} grid")
    sx, sy = sigma_factor * w, sigma_factor * h
    xs = np.arange(W, dtype=np.float64)
    ys = np.arange(H, dtype=np.float64)
    g = np.exp(-((xs[None, :] - cx) ** 2 / (2 * sx * sx) + (ys[:, None] - cy) ** 2 / (2 * sy * sy)))
    return Tensor(g[None])


def frame_target(feature_box: Box, H: int, W: int, sigma_factor: float) -> Tensor:
    """Gaussian target for a box given in continuous feature coordinates.

    Correlation output ``(y, x)`` is the response with the template centered on
    pixel ``(y, x)``, whose center lies at ``(y + 0.5, x + 0.5)``; shift by half a
    pixel and clamp the center onto the grid.
    """
    x, y, w, h = feature_box
    cx = min(max(x + w / 2.0 - 0.5, 0.0), W - 1.0)
    cy = min(max(y + h / 2.0 - 0.5, 0.0), H - 1.0)
    return gaussian_target((cx - w / 2.0, cy - h / 2.0, w, h), H, W, sigma_factor)


def map_similarity(corr: CorrelationOutput, det_box: Box, params: TrackerParams | None = None) -> Tensor:
    """Pool the correlation output inside ``det_box`` (feature coords) into a 256-vector."""
    x, y, w, h = det_box
    if w <= 0 or h <= 0:
        raise ContractError(f"degenerate detection box {det_box}")
    grid = params.map_grid if params is not None else 3
    pool_map = params is not None and params.map_pool == "map"
    if pool_map:
        v = mean(roi_align(corr.likelihood_map, det_box, grid, grid), axis=(1, 2))
        return broadcast_to(v, (corr.refined_features.shape[0],))
    return mean(roi_align(corr.refined_features, det_box, grid, grid), axis=(1, 2))


def score_head(v: Tensor, params: TrackerParams) -> Tensor:
    """Two 1x1 convs over the channel-first similarity tensor ``[256, ...]``."""
    return conv1x1(relu(conv1x1(v, params.score_conv_1)), params.score_conv_2)


def match_score(v_pair: Tensor, v_map: Tensor, params: TrackerParams) -> Tensor:
    if v_pair.shape != v_map.shape or v_pair.shape != (params.hidden,):
        raise ContractError(f"similarity vectors must both be [{params.hidden}], "
                            f"got {v_pair.shape} and {v_map.shape}")
    return reshape(score_head(v_pair + v_map, params), ())


def match_logits(v_pair: Tensor, v_map: Tensor | None, params: TrackerParams) -> Tensor:
    """Batched :func:`match_score` over ``[Q, P, 256]`` inputs, giving ``[Q, P]``."""
    v = v_pair if v_map is None else v_pair + v_map
    Q, P, _ = v.shape
    out = score_head(transpose(v, (2, 0, 1)), params)
    return reshape(out, (Q, P))


def correlation_loss(likelihood_map: Tensor, target: Tensor, squash: bool = True) -> Tensor:
    """Mean squared error between the (logistic-squashed) map and the target."""
    if likelihood_map.shape != target.shape:
        raise ContractError(f"map {likelihood_map.shape} vs target {target.shape}")
    pred = sigmoid(likelihood_map) if squash else likelihood_map
    return mean(square(sub(pred, target)))


def combined_scores(match_logits: np.ndarray, detections: Sequence, tracks: Sequence[TrackState],
                    params: TrackerParams) -> np.ndarray:
    a_det, b_iou, g_cat = params.cue_weights
    Q, P = len(tracks), len(detections)
    S = np.array(match_logits, dtype=np.float64).reshape(Q, P)
    for p, det in enumerate(detections):
        conf = max(float(det.detection_confidence), 1e-6)
        cat = int(np.argmax(det.category_scores))
        for q, tr in enumerate(tracks):
            S[q, p] += (a_det * np.log(conf) + b_iou * box_iou(tr.last_box, det.box)
                        + g_cat * float(cat == tr.category))
    return S


def associate(match_logits: np.ndarray, detections: Sequence, tracks: Sequence[TrackState],
              params: TrackerParams, mode: str = "greedy") -> list[int | None]:
    """Identity per detection: an existing track identity, or ``None`` for a new one.

    Greedy mode visits detections by descending confidence and takes the best
    free track. Hungarian mode maximizes the total margin over the threshold
    among pairs that clear it.
    """
    P = len(detections)
    if len(tracks) == 0:
        return [None] * P
    S = combined_scores(match_logits, detections, tracks, params)
    thr = params.new_identity_threshold
    out: list[int | None] = [None] * P
    if mode == "greedy":
        order = sorted(range(P), key=lambda p: (-detections[p].detection_confidence, p))
        used: set[int] = set()
        for p in order:
            best, best_q = -np.inf, None
            for q in range(len(tracks)):
                if q not in used and S[q, p] > best:
                    best, best_q = S[q, p], q
            if best_q is not None and best >= thr:
                used.add(best_q)
                out[p] = tracks[best_q].identity
        return out
    if mode == "hungarian":
        gain = np.where(S >= thr, S - thr, 0.0)
        rows, cols = linear_sum_assignment(gain, maximize=True)
        for q, p in zip(rows, cols):
            if S[q, p] >= thr:
                out[p] = tracks[q].identity
        return out
    raise ContractError(f"unknown association mode {mode!r}")


"""Desk-scale stand-in for a backbone and a two-stage detector.

Features come from a fixed strided patch embedding. Proposals come either from
jittered ground truth (``oracle``) or from thresholded connected components
(``blob``). The heads classify, regress boxes and predict masks from ROI
features.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .structures import Box, Frame, box_iou
from .tensor import (
    ContractError,
    OpParams,
    Tensor,
    conv1x1,
    mean,
    relu,
    reshape,
    roi_align,
    softmax_axis,
    transpose,
    upsample_nearest,
)


@dataclass
class DetectorParams:
    stride: int
    embed_1: OpParams  # 3*s*s -> C
    embed_2: OpParams  # C -> C
    cls_head: OpParams  # C -> K
    box_head: OpParams  # C -> 4
    mask_head: OpParams  # C -> 1
    roi_size: int = 7
    mask_size: int = 14

    @classmethod
    def init(cls, channels: int = 32, stride: int = 4, num_categories: int = 3,
             seed: int = 0, roi_size: int = 7, mask_size: int = 14) -> "DetectorParams":
        if mask_size % roi_size:
            raise ContractError(f"mask grid {mask_size} must be a multiple of the ROI grid {roi_size}")
        rng = np.random.default_rng(seed)
        embed_1 = OpParams.init(3 * stride * stride, channels, rng, gain=2.0)
        embed_2 = OpParams.init(channels, channels, rng, gain=2.0)
        for p in embed_1.parameters() + embed_2.parameters():
            p.requires_grad = False  # the extractor is a fixed stack
        return cls(stride=stride, embed_1=embed_1, embed_2=embed_2,
                   cls_head=OpParams.init(channels, num_categories, rng),
                   box_head=OpParams.init(channels, 4, rng, gain=0.1),
                   mask_head=OpParams.init(channels, 1, rng),
                   roi_size=roi_size, mask_size=mask_size)

    @property
    def channels(self) -> int:
        return self.embed_2.out_channels

    @property
    def num_categories(self) -> int:
        return self.cls_head.out_channels

    def parameters(self) -> list[Tensor]:
        return self.cls_head.parameters() + self.box_head.parameters() + self.mask_head.parameters()


@dataclass
class ObjectProposal:
    box: Box  # image pixels
    roi_features: Tensor  # [C, h, w]
    category_scores: np.ndarray
    detection_confidence: float
    mask_logits: np.ndarray | None = None
    # ground-truth identity the proposal was drawn from (oracle mode only)
    source_id: int | None = None
    extra: dict = field(default_factory=dict)


def extract_features(frame: Frame | np.ndarray, params: DetectorParams) -> Tensor:
    """Strided ``s x s`` patch embedding followed by a 1x1 conv, both ReLU'd.

    Output is ``[C, Hi // s, Wi // s]``; trailing rows/columns that do not fill a
    patch are dropped.
    """
    pix = frame.pixels if isinstance(frame, Frame) else frame
    s = params.stride
    _, Hi, Wi = pix.shape
    if Hi < s or Wi < s:
        raise ContractError(f"frame {Hi}x{Wi} smaller than stride {s}")
    H, W = Hi // s, Wi // s
    p = pix[:, :H * s, :W * s].reshape(3, H, s, W, s).transpose(0, 2, 4, 1, 3).reshape(3 * s * s, H, W)
    x = relu(conv1x1(Tensor(p), params.embed_1))
    return relu(conv1x1(x, params.embed_2))


def to_feature_box(box: Box, stride: int) -> Box:
    return tuple(v / stride for v in box)


def roi_features(features: Tensor, box: Box, params: DetectorParams) -> Tensor:
    return roi_align(features, to_feature_box(box, params.stride), params.roi_size, params.roi_size)


def _jitter_box(box: Box, jitter: float, rng: np.random.Generator) -> Box:
    x, y, w, h = box
    if jitter <= 0:
        return box
    m = jitter * max(w, h)
    x0, y0, x1, y1 = x + rng.uniform(-m, m), y + rng.uniform(-m, m), \
        x + w + rng.uniform(-m, m), y + h + rng.uniform(-m, m)
    # keep the box nondegenerate without moving any corner further than m
    if x1 - x0 < 1e-3:
        x0, x1 = x + w / 2 - 5e-4, x + w / 2 + 5e-4
    if y1 - y0 < 1e-3:
        y0, y1 = y + h / 2 - 5e-4, y + h / 2 + 5e-4
    return (x0, y0, x1 - x0, y1 - y0)


def propose(frame: Frame, features: Tensor, params: DetectorParams, mode: str = "oracle",
            gt: list[tuple[int, int, Box]] | None = None, jitter: float = 0.0,
            rng: np.random.Generator | None = None, lum_threshold: float = 0.15,
            min_area: int = 4, nms_iou: float = 0.5) -> list[ObjectProposal]:
    """Candidate objects for one frame.

    ``gt`` holds ``(identity, category, box)`` triples and is required in
    oracle mode, where category scores are the one-hot ground-truth label.
    Blob mode scores categories uniformly until the heads run.
    """
    K = params.num_categories
    if mode == "oracle":
        if gt is None:
            raise ContractError("oracle proposals need ground-truth boxes")
        rng = rng if rng is not None else np.random.default_rng(0)
        out = []
        for ident, cat, box in gt:
            b = _jitter_box(box, jitter, rng)
            onehot = np.zeros(K)
            onehot[cat] = 1.0
            out.append(ObjectProposal(box=b, roi_features=roi_features(features, b, params),
                                      category_scores=onehot, detection_confidence=1.0,
                                      source_id=ident))
        return out
    if mode != "blob":
        raise ContractError(f"unknown proposal mode {mode!r}")

    lum = frame.pixels.mean(axis=0)
    labels, n = ndimage.label(lum > lum_threshold, structure=np.ones((3, 3)))
    cands = []
    for sl, k in zip(ndimage.find_objects(labels), range(1, n + 1)):
        area = int((labels[sl] == k).sum())
        if area < min_area:
            continue
        y, x = sl[0].start, sl[1].start
        h, w = sl[0].stop - y, sl[1].stop - x
        cands.append(((float(x), float(y), float(w), float(h)), area / float(w * h)))
    cands.sort(key=lambda c: -c[1])
    kept: list[tuple[Box, float]] = []
    for box, conf in cands:
        if all(box_iou(box, kb) <= nms_iou for kb, _ in kept):
            kept.append((box, conf))
    return [ObjectProposal(box=b, roi_features=roi_features(features, b, params),
                           category_scores=np.full(K, 1.0 / K), detection_confidence=c)
            for b, c in kept]


def predict_heads(proposal_features: Tensor, params: DetectorParams):
    """Return ``(category_probs[P,K], box_deltas[P,4], mask_logits[P,hm,wm])`` as tensors."""
    P = proposal_features.shape[0]
    K = params.num_categories
    m = params.mask_size
    if P == 0:
        return Tensor(np.zeros((0, K))), Tensor(np.zeros((0, 4))), Tensor(np.zeros((0, m, m)))
    if proposal_features.ndim != 4 or proposal_features.shape[1] != params.channels:
        raise ContractError(f"expected [P,{params.channels},h,w], got {proposal_features.shape}")
    pooled = transpose(mean(proposal_features, axis=(2, 3)), (1, 0))  # [C, P]
    probs = softmax_axis(transpose(conv1x1(pooled, params.cls_head), (1, 0)), axis=1)
    deltas = transpose(conv1x1(pooled, params.box_head), (1, 0))
    chw = transpose(proposal_features, (1, 0, 2, 3))  # [C, P, h, w]
    logits = conv1x1(chw, params.mask_head)  # [1, P, h, w]
    h = proposal_features.shape[2]
    logits = reshape(logits, (P, h, proposal_features.shape[3]))
    return probs, deltas, upsample_nearest(logits, m // h)


def class_logits(proposal_features: Tensor, params: DetectorParams) -> Tensor:
    """Pre-softmax classifier output ``[P, K]``, for the training loss."""
    pooled = transpose(mean(proposal_features, axis=(2, 3)), (1, 0))
    return transpose(conv1x1(pooled, params.cls_head), (1, 0))


def encode_box(proposal: Box, target: Box) -> np.ndarray:
    px, py = proposal[0] + proposal[2] / 2, proposal[1] + proposal[3] / 2
    tx, ty = target[0] + target[2] / 2, target[1] + target[3] / 2
    return np.array([(tx - px) / proposal[2], (ty - py) / proposal[3],
                     np.log(target[2] / proposal[2]), np.log(target[3] / proposal[3])])


def decode_box(proposal: Box, deltas: np.ndarray) -> Box:
    px, py = proposal[0] + proposal[2] / 2, proposal[1] + proposal[3] / 2
    w = proposal[2] * np.exp(np.clip(deltas[2], -4, 4))
    h = proposal[3] * np.exp(np.clip(deltas[3], -4, 4))
    cx, cy = px + deltas[0] * proposal[2], py + deltas[1] * proposal[3]
    return (cx - w / 2, cy - h / 2, w, h)


def paste_mask(mask_logits: np.ndarray, box: Box, height: int, width: int) -> np.ndarray:
    """Nearest-cell paste of a mask grid into the image; logits >= 0 are foreground."""
    out = np.zeros((height, width), dtype=bool)
    x, y, w, h = box
    x0, y0 = max(int(np.floor(x)), 0), max(int(np.floor(y)), 0)
    x1, y1 = min(int(np.ceil(x + w)), width), min(int(np.ceil(y + h)), height)
    if x1 <= x0 or y1 <= y0:
        return out
    m = mask_logits.shape[0]
    cols = np.clip(((np.arange(x0, x1) + 0.5 - x) / w * m).astype(int), 0, m - 1)
    rows = np.clip(((np.arange(y0, y1) + 0.5 - y) / h * m).astype(int), 0, m - 1)
    out[y0:y1, x0:x1] = mask_logits[np.ix_(rows, cols)] >= 0.0
    return out


def mask_target(mask: np.ndarray, box: Box, size: int) -> np.ndarray:
    """Sample a binary image mask on a ``size x size`` grid over ``box`` (cell centers)."""
    x, y, w, h = box
    H, W = mask.shape
    cy = y + (np.arange(size) + 0.5) * h / size
    cx = x + (np.arange(size) + 0.5) * w / size
    r = np.floor(cy).astype(int)
    c = np.floor(cx).astype(int)
    valid_r = (r >= 0) & (r < H)
    valid_c = (c >= 0) & (c < W)
    out = np.zeros((size, size))
    sub = mask[np.ix_(np.clip(r, 0, H - 1), np.clip(c, 0, W - 1))]
    out[:] = sub * valid_r[:, None] * valid_c[None, :]
    return out

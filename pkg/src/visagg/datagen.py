"""Seeded synthetic videos of moving shapes, and affine pseudo-videos from stills."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .structures import Frame, InstanceTrack, TrackEntry, VideoAnnotation, tight_box
from .tensor import ContractError

CATEGORIES = ("disc", "square", "triangle")


@dataclass
class SynthConfig:
    num_videos: int = 1
    frames_per_video: int = 8
    frame_size: tuple[int, int] = (96, 96)
    objects_per_video: int = 2
    categories: tuple[str, ...] = CATEGORIES
    velocity_range: tuple[float, float] = (1.0, 4.0)
    radius_range: tuple[float, float] = (6.0, 10.0)
    occlusion: bool = True
    # every object gets the same shape, size and color
    identical: bool = False
    # start objects on a ring heading through the center so their paths cross
    crossing: bool = False
    noise: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if min(self.num_videos, self.frames_per_video, self.objects_per_video) <= 0:
            raise ContractError("video count, frame count and object count must be positive")
        if min(self.frame_size) <= 0 or not self.categories:
            raise ContractError("frame size must be positive and categories nonempty")


def _shape_mask(category: str, cx: float, cy: float, r: float, H: int, W: int) -> np.ndarray:
    ys, xs = np.mgrid[0:H, 0:W]
    px, py = xs + 0.5, ys + 0.5
    if category == "disc":
        return (px - cx) ** 2 + (py - cy) ** 2 <= r * r
    if category == "square":
        return (np.abs(px - cx) <= r) & (np.abs(py - cy) <= r)
    if category == "triangle":
        # apex up, base at cy + r; inside if below both slanted edges and above the base
        top = cy - r
        rel = (py - top) / (2.0 * r)
        return (py <= cy + r) & (py >= top) & (np.abs(px - cx) <= rel * r)
    raise ContractError(f"unknown shape category {category!r}")


def _trajectories(cfg: SynthConfig, rng: np.random.Generator, H: int, W: int):
    K, T = cfg.objects_per_video, cfg.frames_per_video
    radii = rng.uniform(*cfg.radius_range, size=K)
    if cfg.identical:
        radii[:] = radii[0]
    if np.any(2 * radii >= min(H, W)):
        raise ContractError(f"objects of radius up to {radii.max():.1f} do not fit a {H}x{W} frame")
    speeds = rng.uniform(*cfg.velocity_range, size=K)
    if cfg.crossing:
        phase = rng.uniform(0, 2 * np.pi)
        angles = phase + 2 * np.pi * np.arange(K) / K
        ring = 0.5 * min(H, W) - radii.max() - 1.0
        pos = np.stack([W / 2 + ring * np.cos(angles), H / 2 + ring * np.sin(angles)], axis=1)
        heading = angles + np.pi + rng.uniform(-0.2, 0.2, size=K)
    else:
        pos = np.stack([rng.uniform(radii, W - radii), rng.uniform(radii, H - radii)], axis=1)
        heading = rng.uniform(0, 2 * np.pi, size=K)
    vel = np.stack([np.cos(heading), np.sin(heading)], axis=1) * speeds[:, None]
    path = np.zeros((T, K, 2))
    for t in range(T):
        path[t] = pos
        vel = vel + rng.normal(0.0, 0.1, size=vel.shape)
        pos = pos + vel
        for k in range(K):
            for ax, extent in ((0, W), (1, H)):
                lo, hi = radii[k], extent - radii[k]
                if pos[k, ax] < lo:
                    pos[k, ax] = 2 * lo - pos[k, ax]
                    vel[k, ax] = abs(vel[k, ax])
                elif pos[k, ax] > hi:
                    pos[k, ax] = 2 * hi - pos[k, ax]
                    vel[k, ax] = -abs(vel[k, ax])
    return path, radii


def _overlaps(path: np.ndarray, radii: np.ndarray) -> bool:
    d = np.linalg.norm(path[:, :, None, :] - path[:, None, :, :], axis=-1)
    lim = 1.5 * (radii[:, None] + radii[None, :])
    K = radii.size
    off = ~np.eye(K, dtype=bool)
    return bool(np.any((d < lim)[:, off]))


def gen_synthetic_video(cfg: SynthConfig, video_id: int = 0,
                        seed: int | None = None) -> tuple[list[Frame], VideoAnnotation]:
    """Render one video; objects bounce off the borders and are drawn in fixed z-order."""
    H, W = cfg.frame_size
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    K = cfg.objects_per_video
    if cfg.identical:
        cats = np.full(K, rng.integers(len(cfg.categories)))
        colors = np.tile(rng.uniform(0.4, 1.0, size=3), (K, 1))
    else:
        cats = rng.integers(len(cfg.categories), size=K)
        colors = rng.uniform(0.3, 1.0, size=(K, 3))
    for _ in range(100):
        path, radii = _trajectories(cfg, rng, H, W)
        if cfg.occlusion or not _overlaps(path, radii):
            break
    else:
        raise ContractError("could not place non-overlapping trajectories; allow occlusion")

    frames: list[Frame] = []
    tracks = [InstanceTrack(identity=k + 1, category=int(cats[k]), video_id=video_id)
              for k in range(K)]
    for t in range(cfg.frames_per_video):
        img = np.clip(rng.normal(0.0, cfg.noise, size=(3, H, W)), 0.0, 1.0)
        full = [_shape_mask(cfg.categories[cats[k]], *path[t, k], radii[k], H, W) for k in range(K)]
        covered = np.zeros((H, W), dtype=bool)
        visible = [None] * K
        for k in reversed(range(K)):  # object K-1 is on top
            visible[k] = full[k] & ~covered
            covered |= full[k]
        for k in range(K):
            img[:, full[k]] = colors[k][:, None]
        img = np.round(img * 255.0) / 255.0
        frames.append(Frame(pixels=img, index=t, video_id=video_id))
        for k in range(K):
            box = tight_box(visible[k])
            if box is not None:
                tracks[k].add(TrackEntry(frame=t, box=box, mask=visible[k]))
    ann = VideoAnnotation(video_id=video_id, height=H, width=W,
                          num_frames=cfg.frames_per_video,
                          instances=[tr for tr in tracks if tr.entries])
    return frames, ann


def gen_dataset(cfg: SynthConfig) -> list[tuple[list[Frame], VideoAnnotation]]:
    """Videos get per-video seeds derived from ``cfg.seed``, so each is reproducible alone."""
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.num_videos)
    return [gen_synthetic_video(cfg, video_id=v + 1, seed=int(s.generate_state(1)[0]))
            for v, s in enumerate(seeds)]


# ---------------------------------------------------------------- still-image augmentation


@dataclass
class AffineAugConfig:
    T: int = 3
    rotation_deg: float = 15.0
    translation: float = 0.1
    shear: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if min(self.rotation_deg, self.translation, self.shear) < 0:
            raise ContractError("affine ranges must be nonnegative")
        if self.T <= 0:
            raise ContractError("T must be positive")


def affine_matrix(angle_deg: float, tx: float, ty: float, shear: float,
                  center: tuple[float, float]) -> np.ndarray:
    """3x3 forward map in (x, y) pixel-center coordinates, rotating/shearing about ``center``."""
    a = np.deg2rad(angle_deg)
    cx, cy = center
    rot = np.array([[np.cos(a), -np.sin(a), 0], [np.sin(a), np.cos(a), 0], [0, 0, 1]])
    sh = np.array([[1, shear, 0], [0, 1, 0], [0, 0, 1]])
    to0 = np.array([[1, 0, -cx], [0, 1, -cy], [0, 0, 1]])
    back = np.array([[1, 0, cx + tx], [0, 1, cy + ty], [0, 0, 1]])
    return back @ rot @ sh @ to0


def _warp(arr: np.ndarray, M: np.ndarray, order: int) -> np.ndarray:
    # ndimage maps output (row, col) -> input (row, col); invert the (x, y) forward map
    inv = np.linalg.inv(M)
    P = np.array([[0, 1, 0], [1, 0, 0], [0, 0, 1]])  # swap x/y
    inv_rc = P @ inv @ P
    return ndimage.affine_transform(arr, inv_rc[:2, :2], offset=inv_rc[:2, 2], order=order,
                                    mode="constant", cval=0.0)


def apply_affine(image: np.ndarray, masks: list[np.ndarray], M: np.ndarray):
    """Warp pixels bilinearly and masks by nearest neighbor under the same map."""
    if np.allclose(M, np.eye(3)):
        return image.copy(), [m.copy() for m in masks]
    pix = np.stack([_warp(image[c], M, order=1) for c in range(image.shape[0])])
    out_masks = [_warp(m.astype(np.float64), M, order=0) > 0.5 for m in masks]
    return np.clip(pix, 0.0, 1.0), out_masks


def augment_still(image: np.ndarray, annotations: list[tuple[int, int, np.ndarray]],
                  cfg: AffineAugConfig, video_id: int = 0) -> tuple[list[Frame], VideoAnnotation]:
    """Turn one annotated image into a ``cfg.T``-frame pseudo-video.

    ``annotations`` holds ``(identity, category, mask)`` triples. Instances
    warped entirely out of view are dropped for that frame only.
    """
    _, H, W = image.shape
    rng = np.random.default_rng(cfg.seed)
    tracks = {ident: InstanceTrack(identity=ident, category=cat, video_id=video_id)
              for ident, cat, _ in annotations}
    frames: list[Frame] = []
    for t in range(cfg.T):
        angle = rng.uniform(-cfg.rotation_deg, cfg.rotation_deg)
        tx = rng.uniform(-cfg.translation, cfg.translation) * W
        ty = rng.uniform(-cfg.translation, cfg.translation) * H
        shear = rng.uniform(-cfg.shear, cfg.shear)
        M = affine_matrix(angle, tx, ty, shear, (W / 2.0, H / 2.0))
        pix, masks = apply_affine(image, [m for _, _, m in annotations], M)
        frames.append(Frame(pixels=pix, index=t, video_id=video_id))
        for (ident, _, _), m in zip(annotations, masks):
            box = tight_box(m)
            if box is not None:
                tracks[ident].add(TrackEntry(frame=t, box=box, mask=m))
    return frames, VideoAnnotation(video_id=video_id, height=H, width=W, num_frames=cfg.T,
                                   instances=[tr for tr in tracks.values() if tr.entries])

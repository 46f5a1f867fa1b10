"""Dataset and prediction files.

Layout of a dataset directory::

    annotations.json
    frames/<video id>/<frame index, 4 digits>.ppm

Masks are stored as uncompressed row-major run lengths that start with the run
of zeros (possibly empty). Output is written with sorted keys and fixed
separators so equal inputs give byte-identical files.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import numpy as np

from .structures import Frame, InstanceTrack, TrackEntry, VideoAnnotation

ANNOTATION_FILE = "annotations.json"
FORMAT_VERSION = 1


class DataError(ValueError):
    """Malformed or inconsistent data on disk."""


def rle_encode(mask: np.ndarray) -> list[int]:
    flat = np.asarray(mask, dtype=bool).ravel()
    if flat.size == 0:
        return []
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    return ([0] + runs) if flat[0] else runs


def rle_decode(counts: Sequence[int], height: int, width: int) -> np.ndarray:
    counts = [int(c) for c in counts]
    if any(c < 0 for c in counts):
        raise DataError("negative run length")
    if sum(counts) != height * width:
        raise DataError(f"run lengths sum to {sum(counts)}, expected {height * width}")
    vals = np.arange(len(counts)) % 2 == 1
    return np.repeat(vals, counts).reshape(height, width)


# ---------------------------------------------------------------- frames


def write_ppm(path: Path, pixels: np.ndarray) -> None:
    """Binary 8-bit P6 from a ``[3, H, W]`` array in ``[0, 1]``."""
    _, H, W = pixels.shape
    data = np.clip(np.rint(pixels * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{W} {H}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_ppm(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(raw) and not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    if tokens[0] != b"P6":
        raise DataError(f"{path}: not a binary PPM")
    W, H, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise DataError(f"{path}: only 8-bit PPM is supported")
    body = raw[pos + 1:pos + 1 + 3 * W * H]
    if len(body) != 3 * W * H:
        raise DataError(f"{path}: truncated pixel data")
    return np.frombuffer(body, dtype=np.uint8).reshape(H, W, 3).transpose(2, 0, 1) / 255.0


def frame_path(root: Path, video_id: int, index: int) -> Path:
    return Path(root) / "frames" / str(video_id) / f"{index:04d}.ppm"


# ---------------------------------------------------------------- annotation documents


def _track_doc(tr: InstanceTrack, with_scores: bool) -> dict:
    doc = {"video_id": tr.video_id, "identity": tr.identity, "category": tr.category,
           "entries": []}
    if with_scores:
        doc["score"] = float(tr.score)
    for e in tr.entries:
        ed = {"frame": e.frame, "box": [float(v) for v in e.box], "mask": rle_encode(e.mask)}
        if with_scores:
            ed["score"] = float(e.score)
        doc["entries"].append(ed)
    return doc


def to_document(videos: Sequence[VideoAnnotation], predictions: Sequence[InstanceTrack] | None = None,
                categories: Sequence[str] | None = None) -> dict:
    """Ground truth when ``predictions`` is None, otherwise a prediction file over the same videos."""
    doc = {"format": FORMAT_VERSION,
           "videos": [{"id": v.video_id, "height": v.height, "width": v.width, "frames": v.num_frames}
                      for v in videos]}
    if categories is not None:
        doc["categories"] = list(categories)
    if predictions is None:
        doc["instances"] = [_track_doc(tr, False) for v in videos for tr in v.instances]
    else:
        doc["predictions"] = [_track_doc(tr, True) for tr in predictions]
    return doc


def dumps(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"


def _parse_track(d: dict, videos: dict[int, dict], scored: bool) -> InstanceTrack:
    try:
        vid = int(d["video_id"])
        if vid not in videos:
            raise DataError(f"instance refers to unknown video {vid}")
        v = videos[vid]
        tr = InstanceTrack(identity=int(d["identity"]), category=int(d["category"]), video_id=vid,
                           score=float(d["score"]) if scored else 1.0)
        for e in d["entries"]:
            t = int(e["frame"])
            if not 0 <= t < v["frames"]:
                raise DataError(f"video {vid}: frame {t} outside 0..{v['frames'] - 1}")
            box = tuple(float(x) for x in e["box"])
            if len(box) != 4:
                raise DataError(f"video {vid} frame {t}: box needs 4 numbers")
            tr.add(TrackEntry(frame=t, box=box, mask=rle_decode(e["mask"], v["height"], v["width"]),
                              score=float(e["score"]) if scored else 1.0))
    except (KeyError, TypeError) as exc:
        raise DataError(f"malformed instance record: {exc!r}") from exc
    except ValueError as exc:
        if isinstance(exc, DataError):
            raise
        raise DataError(str(exc)) from exc
    return tr


def from_document(doc: dict) -> tuple[list[VideoAnnotation], list[InstanceTrack] | None]:
    """Inverse of :func:`to_document`; returns ``(videos, predictions or None)``."""
    if not isinstance(doc, dict) or "videos" not in doc:
        raise DataError("annotation document needs a 'videos' list")
    try:
        vmeta = {int(v["id"]): {"height": int(v["height"]), "width": int(v["width"]),
                                "frames": int(v["frames"])} for v in doc["videos"]}
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed video record: {exc!r}") from exc
    if len(vmeta) != len(doc["videos"]):
        raise DataError("duplicate video ids")
    videos = {vid: VideoAnnotation(vid, m["height"], m["width"], m["frames"]) for vid, m in vmeta.items()}
    for d in doc.get("instances", []):
        tr = _parse_track(d, vmeta, False)
        videos[tr.video_id].instances.append(tr)
    preds = None
    if "predictions" in doc:
        preds = [_parse_track(d, vmeta, True) for d in doc["predictions"]]
    return [videos[v] for v in vmeta], preds


def load_document(path: Path) -> tuple[list[VideoAnnotation], list[InstanceTrack] | None]:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: {exc}") from exc
    return from_document(doc)


# ---------------------------------------------------------------- datasets


def write_dataset(root: Path, dataset: Sequence[tuple[Sequence[Frame], VideoAnnotation]],
                  categories: Sequence[str] | None = None) -> None:
    root = Path(root)
    for frames, ann in dataset:
        for f in frames:
            p = frame_path(root, ann.video_id, f.index)
            p.parent.mkdir(parents=True, exist_ok=True)
            write_ppm(p, f.pixels)
    (root / ANNOTATION_FILE).write_text(dumps(to_document([a for _, a in dataset], None, categories)))


def read_dataset(root: Path) -> list[tuple[list[Frame], VideoAnnotation]]:
    root = Path(root)
    ann_path = root / ANNOTATION_FILE
    if not ann_path.is_file():
        raise DataError(f"{ann_path} not found")
    videos, _ = load_document(ann_path)
    out = []
    for v in videos:
        frames = []
        for t in range(v.num_frames):
            p = frame_path(root, v.video_id, t)
            if not p.is_file():
                raise DataError(f"missing frame {p}")
            px = read_ppm(p)
            if px.shape[1:] != (v.height, v.width):
                raise DataError(f"{p}: size {px.shape[1:]} does not match {v.height}x{v.width}")
            frames.append(Frame(px, t, v.video_id))
        out.append((frames, v))
    return out

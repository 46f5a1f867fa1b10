import numpy as np

from visagg.structures import InstanceTrack, TrackEntry

GRID = (6, 6)


def rect(y0, y1, x0, x1, shape=GRID):
    m = np.zeros(shape, dtype=bool)
    m[y0:y1, x0:x1] = True
    return m


def make_track(video, ident, category, masks, score=1.0):
    """``masks`` maps frame index -> boolean mask."""
    t = InstanceTrack(identity=ident, category=category, video_id=video, score=score)
    for f in sorted(masks):
        ys, xs = np.nonzero(masks[f])
        box = (float(xs.min()), float(ys.min()), float(xs.max() - xs.min() + 1), float(ys.max() - ys.min() + 1)) \
            if ys.size else (0.0, 0.0, 1.0, 1.0)
        t.add(TrackEntry(frame=f, box=box, mask=masks[f], score=score))
    return t


def micro_dataset():
    """Three one-frame videos with a deliberate false positive and a missed object.

    Category 0: v1 exact hit (0.9), v2 false positive (0.8) while its object is
    missed, v3 a partial hit with IoU 5/8 (0.7). Category 1: v2 exact hit (0.5).
    """
    gA, gB, gC = rect(0, 2, 0, 2), rect(3, 5, 3, 5), rect(1, 3, 1, 5)
    gD = rect(0, 1, 4, 6)
    gts = [make_track(1, 1, 0, {0: gA}), make_track(2, 1, 0, {0: gB}), make_track(2, 2, 1, {0: gD}),
           make_track(3, 1, 0, {0: gC})]
    partial = rect(1, 3, 1, 5)
    partial[2, 1:4] = False  # 5 of the 8 gt pixels
    preds = [make_track(1, 1, 0, {0: gA}, 0.9), make_track(2, 1, 0, {0: rect(0, 2, 0, 2)}, 0.8),
             make_track(3, 1, 0, {0: partial}, 0.7), make_track(2, 2, 1, {0: gD}, 0.5)]
    return preds, gts


ACCEPTANCE: list[tuple[int, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n, ok, detail in sorted(ACCEPTANCE):
            terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")

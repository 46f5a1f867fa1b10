"""Command-line entry point: ``visagg {gen,run,eval,selftest,report}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
The default seed comes from ``VISAGG_SEED`` when ``--seed`` is not given.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import io
from .config import ConfigError, RunConfig, load_config
from .datagen import CATEGORIES, AffineAugConfig, SynthConfig, augment_still, gen_dataset
from .structures import Frame
from .pipeline import ModelParams, PipelineConfig, derive_seed, run_video
from .tensor import ContractError
from .training import NumericalError, train
from .viseval import EmptyBenchmarkError, EvalConfig, evaluate

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
SEED_ENV = "VISAGG_SEED"

class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _default_seed() -> int | None:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def _size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like 96x96, got {text!r}") from None
    if h <= 0 or w <= 0:
        raise argparse.ArgumentTypeError("size must be positive")
    return h, w


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


# ---------------------------------------------------------------- gen


def cmd_gen(args) -> int:
    seed = args.seed if args.seed is not None else (_default_seed() or 0)
    out = Path(args.out)
    if args.from_still:
        img_path, ann_path = args.from_still
        image = io.read_ppm(Path(img_path))
        videos, _ = io.load_document(Path(ann_path))
        if len(videos) != 1:
            raise io.DataError("a still annotation must describe exactly one image")
        annots = [(inst.identity, inst.category, inst.entries[0].mask) for inst in videos[0].instances
                  if inst.entries]
        dataset = []
        for v in range(args.videos):
            cfg = AffineAugConfig(T=args.frames, seed=derive_seed(seed, v + 1))
            dataset.append(augment_still(image, annots, cfg, video_id=v + 1))
        cats = None
    else:
        cfg = SynthConfig(num_videos=args.videos, frames_per_video=args.frames, frame_size=args.size,
                          objects_per_video=args.objects, identical=args.identical,
                          crossing=args.crossing, occlusion=not args.no_occlusion, seed=seed)
        dataset = gen_dataset(cfg)
        cats = list(CATEGORIES)
    try:
        out.mkdir(parents=True, exist_ok=True)
        io.write_dataset(out, dataset, cats)
    except OSError as exc:
        raise io.DataError(f"cannot write to {out}: {exc.strerror or exc}") from exc
    n = sum(len(f) for f, _ in dataset)
    print(f"wrote {len(dataset)} videos, {n} frames to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- run


def _run_one(job):
    frames, ann, pipeline, params = job
    return run_video(frames, ann, pipeline, params)


def run_dataset(dataset, pipeline: PipelineConfig, params: ModelParams, jobs: int = 1):
    """Tracks for every video, in dataset order; results do not depend on ``jobs``."""
    work = [(frames, ann if pipeline.proposal_mode == "oracle" else None, pipeline, params)
            for frames, ann in dataset]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            per_video = list(pool.map(_run_one, work))
    else:
        per_video = [_run_one(w) for w in work]
    return [tr for tracks in per_video for tr in tracks]


def cmd_run(args) -> int:
    rc: RunConfig = load_config(args.config)
    seed = args.seed if args.seed is not None else _default_seed()
    if seed is not None:
        rc = rc.with_seed(seed)
    overrides = {}
    if args.proposals:
        overrides["proposal_mode"] = args.proposals
    if args.strict_causal:
        overrides["strict_causal"] = True
    if overrides:
        rc.pipeline = PipelineConfig(**{**rc.pipeline.__dict__, **overrides})
    if args.train is not None:
        if args.train < 0:
            raise UsageError("--train must be nonnegative")
        rc.train.steps = args.train
    if args.jobs < 1:
        raise UsageError("--jobs must be at least 1")

    dataset = io.read_dataset(Path(args.data))
    params = rc.build_params()
    if rc.train.steps > 0:
        train_set = io.read_dataset(Path(args.train_data)) if args.train_data else dataset
        hist = train(params, train_set, rc.pipeline, rc.train)
        print(f"trained {rc.train.steps} steps, final loss {hist[-1]['total']:.4f}")
    tracks = run_dataset(dataset, rc.pipeline, params, args.jobs)
    doc_text = io.dumps(io.to_document([a for _, a in dataset], tracks))
    out = Path(args.out)
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(doc_text)
    except OSError as exc:
        raise io.DataError(f"cannot write {out}: {exc.strerror or exc}") from exc
    print(f"wrote {len(tracks)} tracks over {len(dataset)} videos to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- eval


def _load_gt(path: Path):
    path = Path(path)
    videos, _ = io.load_document(path / io.ANNOTATION_FILE if path.is_dir() else path)
    return videos


def load_pair(pred_path: Path, gt_path: Path):
    gt_videos = _load_gt(gt_path)
    pv, preds = io.load_document(Path(pred_path))
    if preds is None:
        raise io.DataError(f"{pred_path} holds no predictions")
    gt_ids = {v.video_id for v in gt_videos}
    bad = sorted(({v.video_id for v in pv} ^ gt_ids) | ({p.video_id for p in preds} - gt_ids))
    if bad:
        raise io.DataError("video ids differ between predictions and ground truth: "
                           + ", ".join(str(b) for b in bad))
    gts = [inst for v in gt_videos for inst in v.instances]
    return preds, gts, gt_videos


def _fmt(v):
    return "n/a" if v is None else f"{v:.4f}"


def cmd_eval(args) -> int:
    preds, gts, _ = load_pair(args.pred, args.gt)
    try:
        cfg = EvalConfig(**({"iou_thresholds": args.thresholds} if args.thresholds else {}),
                         **({"ar_budgets": args.budgets} if args.budgets else {}))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    res = evaluate(preds, gts, cfg)
    for k, v in res.headline().items():
        print(f"{k:<5} {_fmt(v)}")
    out = Path(args.out) if args.out else Path(args.pred).with_suffix(".eval.json")
    try:
        out.write_text(json.dumps(res.to_dict(), sort_keys=True, indent=1) + "\n")
    except OSError as exc:
        raise io.DataError(f"cannot write {out}: {exc.strerror or exc}") from exc
    return EXIT_OK


# ---------------------------------------------------------------- selftest


def cmd_selftest(args) -> int:
    from .selftest import MODULES, run_checks

    if args.module is not None and args.module not in MODULES:
        raise UsageError(f"unknown module {args.module!r}; choose from {', '.join(MODULES)}")
    if not 1e-6 <= args.eps <= 1e-3:
        raise UsageError("--eps must lie in [1e-6, 1e-3]")
    results = run_checks(args.module, args.eps, args.tolerance)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}\t{r.module}\t{r.name}\t{r.error:.3e}\t{r.seconds:.2f}s")
    failed = [r for r in results if not r.passed]
    if failed:
        for r in failed:
            print(f"selftest: {r.name} error {r.error:.3e} exceeds tolerance", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"all {len(results)} checks passed")
    return EXIT_OK


# ---------------------------------------------------------------- report


def cmd_report(args) -> int:
    from .plotting import ap_curve_figure, overlay_figure

    preds, gts, gt_videos = load_pair(args.pred, args.data)
    res = evaluate(preds, gts)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = [ap_curve_figure(res, out / "ap_by_threshold.png")]
    wanted = set(args.videos) if args.videos else None
    for v in gt_videos:
        if wanted is not None and v.video_id not in wanted:
            continue
        frames = [Frame(io.read_ppm(io.frame_path(args.data, v.video_id, t)), t, v.video_id)
                  for t in range(v.num_frames)]
        tracks = [p for p in preds if p.video_id == v.video_id]
        written.append(overlay_figure(frames, tracks, out / f"overlay_{v.video_id}.png"))
    rows = [["category", "iou_threshold", "ap"]]
    for c, row in zip(res.categories, res.ap_per_category_per_threshold):
        rows += [[str(c), f"{t:.2f}", f"{a:.4f}"] for t, a in zip(res.thresholds, row)]
    table = "\n".join(",".join(r) for r in rows) + "\n"
    (out / "ap_table.csv").write_text(table)
    sys.stdout.write(table)
    for p in written:
        print(f"# figure {p}")
    return EXIT_OK


# ---------------------------------------------------------------- wiring


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="visagg", description="Desk-scale video instance segmentation toolkit.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--videos", type=int, default=2)
    g.add_argument("--frames", type=int, default=8)
    g.add_argument("--size", type=_size, default=(96, 96), help="HxW, e.g. 96x96")
    g.add_argument("--objects", type=int, default=2)
    g.add_argument("--seed", type=int)
    g.add_argument("--identical", action="store_true", help="all objects share shape and color")
    g.add_argument("--crossing", action="store_true", help="objects head through the center")
    g.add_argument("--no-occlusion", action="store_true")
    g.add_argument("--from-still", nargs=2, metavar=("IMG", "ANN"),
                   help="pseudo-videos from one PPM image and its annotation file")
    g.set_defaults(func=cmd_gen)

    r = sub.add_parser("run", help="optionally train, then track every video")
    r.add_argument("--data", required=True)
    r.add_argument("--config")
    r.add_argument("--out", required=True)
    r.add_argument("--proposals", choices=["oracle", "blob"])
    r.add_argument("--train", type=int, metavar="STEPS")
    r.add_argument("--train-data", help="dataset to train on (default: --data)")
    r.add_argument("--strict-causal", action="store_true")
    r.add_argument("--seed", type=int)
    r.add_argument("--jobs", type=int, default=1)
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="score predictions against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True, help="annotation file or dataset directory")
    e.add_argument("--thresholds", type=_floats)
    e.add_argument("--budgets", type=_ints)
    e.add_argument("--out", help="result file (default: <pred>.eval.json)")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("selftest", help="gradient and oracle checks")
    s.add_argument("--gradcheck", action="store_true", help="accepted for symmetry; checks always run")
    s.add_argument("--eps", type=float, default=1e-5)
    s.add_argument("--tolerance", type=float, default=1e-5)
    s.add_argument("--module")
    s.set_defaults(func=cmd_selftest)

    p = sub.add_parser("report", help="figures and a CSV table for a prediction file")
    p.add_argument("--pred", required=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="directory for figures")
    p.add_argument("--videos", type=_ints, help="only these video ids get overlays")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # argparse: --help exits 0, bad usage exits 1
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"visagg: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (io.DataError, EmptyBenchmarkError, ContractError, FileNotFoundError) as exc:
        print(f"visagg: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"visagg: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FloatingPointError as exc:
        print(f"visagg: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: synth, train, detect, eval, anchors, bench."""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import dataio
from .anchors import AnchorDesign, baseline_design, coverage_histogram, write_coverage_csv
from .config import ConfigError, InferenceConfig, NetworkConfig, ScaleSet, TrainConfig, load_json
from .dataio import ParseError
from .evaluation import (SUBSETS, EllipseRecord, EvalRecord, EvaluationError, average_precision, fddb_roc,
                         summary_line, write_pr_csv, write_roc_csv)
from .inference import detect_multiscale_arrays
from .network import Network, build_network
from .training import TrainSample, train
from .weights import WeightFileError

IMAGE_SUFFIXES = (".ppm", ".pgm", ".pnm", ".tensor")
log = logging.getLogger("smallface")


class CliError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers

def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in text.split(",") if t)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _side_list(text: str) -> list[float]:
    """``4-32`` (inclusive integer range) or ``4,8,12``."""
    try:
        if "-" in text:
            lo, hi = text.split("-")
            return [float(s) for s in range(int(lo), int(hi) + 1)]
        return [float(t) for t in text.split(",") if t]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a range like 4-32 or a list like 4,8,16, got {text!r}") from None


def _size(text: str) -> tuple[int, int]:
    try:
        w, h = text.lower().split("x")
        return int(w), int(h)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WxH, got {text!r}") from None


def _image_files(path: Path) -> list[Path]:
    if path.is_file():
        return [path]
    if not path.is_dir():
        raise CliError(f"input not found: {path}")
    files = sorted(p for p in path.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise CliError(f"no {'/'.join(IMAGE_SUFFIXES)} images under {path}")
    return files


def _image_id(path: Path, root: Path) -> str:
    return path.name if root.is_file() else path.relative_to(root).as_posix()


def _load_configs(path) -> tuple[NetworkConfig, TrainConfig]:
    if path is None:
        return NetworkConfig(), TrainConfig()
    d = load_json(path)
    extra = set(d) - {"network", "train"}
    if extra:
        raise ConfigError(f"{path}: unknown sections {sorted(extra)}; expected 'network' and 'train'")
    try:
        return NetworkConfig.from_dict(d.get("network", {})), TrainConfig.from_dict(d.get("train", {}))
    except (TypeError, ConfigError) as e:
        raise ConfigError(f"{path}: {e}") from None


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(args) -> int:
    spec = dataio.SyntheticSceneSpec(height=args.height, width=args.width, min_faces=args.min_faces,
                                     max_faces=args.max_faces, min_side=args.min_side, max_side=args.max_side,
                                     sides=args.sides, max_overlap_iou=args.max_overlap, seed=args.seed)
    scenes = dataio.generate_synthetic(spec, args.count, args.prefix)
    root = dataio.write_dataset(args.out, scenes)
    n = sum(len(s.boxes) for s in scenes)
    print(f"wrote {len(scenes)} scenes with {n} faces to {root}")
    return 0


def cmd_train(args) -> int:
    ncfg, tcfg = _load_configs(args.config)
    if args.seed is not None:
        tcfg.seed = args.seed
    data = dataio.load_dataset(args.data, args.annotations)
    samples = [TrainSample(img, ann.boxes, ann.ignore_boxes, ann.path) for ann, img in data]
    if args.resume:
        net = Network.load(args.resume)
    else:
        net = build_network(ncfg)
    iters = args.iters if args.iters is not None else tcfg.max_iters

    def progress(rec):
        if "loss" in rec and (rec["iter"] % args.print_every == 0 or rec["iter"] == iters - 1):
            print(f"iter {rec['iter']} lr {rec['lr']:g} loss {rec['loss']:.4f}", flush=True)

    train(net, samples, tcfg, args.out, iters, progress, start_iter=args.start_iter)
    print(f"saved {Path(args.out) / 'final'}")
    return 0


def cmd_detect(args) -> int:
    net = Network.load(args.model)
    cfg = InferenceConfig(per_branch_topk=args.topk, nms_threshold=args.nms_threshold,
                          score_threshold=args.score_threshold,
                          scale_set=ScaleSet.preset(args.scales, args.max_size),
                          box_voting=args.box_voting, threads=args.threads)
    root = Path(args.input)
    out = Path(args.out)
    lines: list[str] = []
    if args.format == "wider":
        out.mkdir(parents=True, exist_ok=True)
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
    for path in _image_files(root):
        image = dataio.read_image(path)
        dets = detect_multiscale_arrays(net, image, cfg)
        image_id = _image_id(path, root)
        if args.format == "wider":
            target = out / Path(image_id).with_suffix(".txt")
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_text(dataio.format_wider_submission(image_id, dets.boxes, dets.scores))
        else:
            lines += dataio.format_detection_records(image_id, dets.boxes, dets.scores, dets.branches,
                                                     dets.scale_ids)
        log.info("%s: %d detections", image_id, len(dets))
    if args.format == "records":
        out.write_text("".join(l + "\n" for l in lines))
    print(f"scales {','.join(map(str, cfg.scale_set.scales))} -> {out}")
    return 0


def _read_detections(path: Path) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    if path.is_dir():
        out = {}
        for f in sorted(path.rglob("*.txt")):
            name, boxes, scores = dataio.parse_wider_submission(f.read_text())
            out[name] = (boxes, scores)
        return out
    try:
        text = path.read_text()
    except OSError as e:
        raise CliError(f"cannot read detections {path}: {e}") from None
    return dataio.parse_detection_records(text, str(path))


def cmd_eval(args) -> int:
    dets = _read_detections(Path(args.detections))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    empty = (np.zeros((0, 4)), np.zeros(0))
    if args.fddb:
        folds = dataio.parse_fddb(args.annotations)
        records = [EllipseRecord(a.path, *_lookup(dets, a.path, empty), a.ellipses) for a in folds]
        for mode in ("discrete", "continuous"):
            pts = fddb_roc(records, mode, args.iou)
            write_roc_csv(out / f"roc_{mode}.csv", pts)
            print(f"mode={mode} points={len(pts)} final_tpr={pts[-1][1]:.6f} final_fp={pts[-1][0]}")
        return 0
    anns = dataio.parse_wider(args.annotations)
    records = [EvalRecord(a.path, *_lookup(dets, a.path, empty), a.boxes, a.tags) for a in anns]
    lines = []
    for subset in ("overall",) + SUBSETS:
        try:
            curve = average_precision(records, None if subset == "overall" else subset, args.iou)
        except EvaluationError:
            lines.append(f"subset={subset} ap=nan num_gt=0 num_det=0")
            continue
        write_pr_csv(out / f"pr_{subset}.csv", curve)
        lines.append(summary_line(subset, curve))
    (out / "summary.txt").write_text("".join(l + "\n" for l in lines))
    print("\n".join(lines))
    return 0


def _lookup(dets, key: str, default):
    if key in dets:
        return dets[key]
    stem = Path(key).with_suffix("").as_posix()
    for k, v in dets.items():
        if Path(k).with_suffix("").as_posix() == stem:
            return v
    return default


def cmd_anchors(args) -> int:
    if args.layout == "sfs":
        design = AnchorDesign(args.base_size)
    else:
        design = baseline_design(args.base_size, three_branch=args.layout == "three")
    records, summaries = coverage_histogram(design, args.sides, args.image_size, args.step)
    write_coverage_csv(args.out, records)
    for s in summaries:
        print(f"side={s.face_side:g} mean={s.mean:.6f} min={s.min:.6f} max={s.max:.6f}")
    print(f"mean_max_iou={np.mean([s.mean for s in summaries]):.6f}")
    return 0


def cmd_bench(args) -> int:
    net = Network.load(args.model) if args.model else build_network(NetworkConfig())
    preset = ScaleSet.preset(args.scales, args.max_size).scales
    w, h = args.size
    image = np.random.default_rng(0).random((3, h, w))
    print("size num_scales scales largest_input seconds per_scale")
    for n in args.num_scales:
        if not 1 <= n <= len(preset):
            raise CliError(f"num-scales {n} outside 1..{len(preset)} for preset {args.scales}")
        scales = preset[-n:]
        per_scale = []
        for s in scales:
            cfg = InferenceConfig(scale_set=ScaleSet((s,), args.max_size))
            t0 = time.perf_counter()
            for _ in range(args.repeat):
                detect_multiscale_arrays(net, image, cfg)
            per_scale.append((time.perf_counter() - t0) / args.repeat)
        f = min(scales[-1] / min(h, w), args.max_size / max(h, w))
        big = f"{round(w * f)}x{round(h * f)}"
        print(f"{w}x{h} {n} {','.join(map(str, scales))} {big} {sum(per_scale):.3f} "
              f"{','.join(f'{t:.3f}' for t in per_scale)}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="smallface", description="Small-face detector on a numpy autodiff engine.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset (PPM images + WIDER-style annotations)")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--height", type=int, default=256)
    s.add_argument("--width", type=int, default=256)
    s.add_argument("--min-faces", type=int, default=1)
    s.add_argument("--max-faces", type=int, default=6)
    s.add_argument("--min-side", type=int, default=4)
    s.add_argument("--max-side", type=int, default=512)
    s.add_argument("--sides", type=_int_list, default=None, help="explicit face sides for every scene")
    s.add_argument("--max-overlap", type=float, default=0.3)
    s.add_argument("--prefix", default="scene")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train from a JSON config on a dataset directory")
    t.add_argument("--data", required=True, help="directory holding annotations.txt and images/")
    t.add_argument("--annotations", default="annotations.txt")
    t.add_argument("--config", default=None, help="JSON file with 'network' and 'train' sections")
    t.add_argument("--out", required=True)
    t.add_argument("--iters", type=int, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--resume", default=None, help="weights stem to start from")
    t.add_argument("--start-iter", type=int, default=0)
    t.add_argument("--print-every", type=int, default=100)
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("detect", help="run the detector over an image or a directory of images")
    d.add_argument("--model", required=True, help="weights stem (without .manifest/.bin)")
    d.add_argument("--input", required=True)
    d.add_argument("--out", required=True, help="records file, or a directory for --format wider")
    d.add_argument("--scales", default="four", help="four, wide, or a comma list of shortest sides")
    d.add_argument("--max-size", type=int, default=1600)
    d.add_argument("--format", choices=("records", "wider"), default="records")
    d.add_argument("--threads", type=int, default=1)
    d.add_argument("--topk", type=int, default=1000)
    d.add_argument("--score-threshold", type=float, default=0.05)
    d.add_argument("--nms-threshold", type=float, default=0.3)
    d.add_argument("--box-voting", action="store_true")
    d.set_defaults(func=cmd_detect)

    e = sub.add_parser("eval", help="AP per difficulty subset, or FDDB-style ROC with --fddb")
    e.add_argument("--detections", required=True, help="records file or directory of per-image files")
    e.add_argument("--annotations", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--iou", type=float, default=0.5)
    e.add_argument("--fddb", action="store_true", help="annotations are an FDDB ellipse fold")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("anchors", help="anchor coverage sweep to CSV")
    a.add_argument("--out", required=True)
    a.add_argument("--base-size", type=int, default=4)
    a.add_argument("--layout", choices=("sfs", "four", "three"), default="sfs")
    a.add_argument("--sides", type=_side_list, default=_side_list("4-32"))
    a.add_argument("--step", type=float, default=1.0)
    a.add_argument("--image-size", type=int, default=1024)
    a.set_defaults(func=cmd_anchors)

    b = sub.add_parser("bench", help="wall time per pyramid configuration")
    b.add_argument("--model", default=None, help="weights stem; an untrained default network if omitted")
    b.add_argument("--size", type=_size, default=(256, 256), help="input image WxH")
    b.add_argument("--scales", default="four")
    b.add_argument("--num-scales", type=_int_list, default=(1, 4), help="use the N largest scales of the preset")
    b.add_argument("--max-size", type=int, default=1600)
    b.add_argument("--repeat", type=int, default=1)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, ConfigError, ParseError, WeightFileError, EvaluationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e.strerror or e}: {e.filename}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

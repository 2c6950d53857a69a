"""``tsr-kit`` command line.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 internal error.
Stages exchange JSON lines so they compose through pipes.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import IO, Iterable, Sequence

from . import __version__
from .bench import benchmark_fps
from .dataset_io import (SuperClass, class_histogram, list_ppm_images, load_gtsdb_annotations,
                         read_ppm, remap_to_superclass)
from .errors import TsrkitError
from .evaluation import evaluate, ground_truth_from_records
from .geometry import BBox, Detection
from .nn.network import Network, count_flops
from .nn.spec import BUNDLED_CONFIGS, resolve_network_spec
from .nn.weights import expected_size, layer_extents, read_header
from .pipeline import ColorSpace, PipelineConfig, PreprocessConfig, Thresholds, run_detection
from .tracker import KalmanParams, Tracker

log = logging.getLogger("tsrkit")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_help(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _configure_logging() -> None:
    level = os.environ.get("TSRKIT_LOG", "warn").lower()
    levels = {"error": logging.ERROR, "warn": logging.WARNING, "warning": logging.WARNING,
              "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s", force=True)


def _open_in(path: str | None):
    if path in (None, "-"):
        return contextlib.nullcontext(sys.stdin)
    return open(path)


def _write_lines(lines: Iterable[str], out: IO[str]) -> None:
    for line in lines:
        out.write(line + "\n")


def _r(v: float, nd: int = 3) -> float:
    v = round(float(v), nd)
    return v + 0.0  # normalizes -0.0


def detection_record(image: str, det: Detection) -> dict:
    cls = SuperClass(det.class_id).label if isinstance(det.class_id, SuperClass) else str(det.class_id)
    b = det.box
    return {"image": image, "class": cls, "left": _r(b.left), "top": _r(b.top),
            "right": _r(b.right), "bottom": _r(b.bottom), "confidence": _r(det.confidence, 6)}


def _parse_class(value) -> int:
    if isinstance(value, int):
        return value
    try:
        return SuperClass.from_label(str(value))
    except TsrkitError:
        try:
            return int(value)
        except ValueError:
            raise TsrkitError(f"unknown class {value!r}") from None


def read_detection_lines(stream: IO[str]) -> "OrderedDict[str, list[Detection]]":
    """Group detection JSON lines by image, preserving first-appearance order."""
    grouped: OrderedDict[str, list[Detection]] = OrderedDict()
    for lineno, line in enumerate(stream, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            rec = json.loads(line)
            box = BBox(float(rec["left"]), float(rec["top"]), float(rec["right"]),
                       float(rec["bottom"]))
            det = Detection(box, _parse_class(rec["class"]), float(rec["confidence"]))
            image = str(rec["image"])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise TsrkitError(f"detections line {lineno}: {exc}") from None
        grouped.setdefault(image, []).append(det)
    return grouped


def _input_images(path: str) -> list[Path]:
    p = Path(path)
    if p.is_dir():
        images = list_ppm_images(p)
        if not images:
            raise TsrkitError(f"no .ppm images in {p}")
        return images
    if not p.exists():
        raise TsrkitError(f"input {p} does not exist")
    return [p]


def _load_model(args) -> Network:
    if args.weights is None:
        log.warning("no --weights given; using seeded random weights (seed %d)", args.seed)
    return Network.from_files(args.model_cfg, args.weights, seed=args.seed)


def _pipeline_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if getattr(args, "config", None) else PipelineConfig()
    pre = cfg.preprocess
    if getattr(args, "color_space", None):
        pre = PreprocessConfig(pre.target_width, pre.target_height, ColorSpace(args.color_space),
                               pre.resize_mode)
    th = cfg.thresholds
    th = Thresholds(args.conf if args.conf is not None else th.conf,
                    args.nms if getattr(args, "nms", None) is not None else th.nms,
                    th.class_aware)
    return PipelineConfig(pre, cfg.augmentation, th, cfg.schedule)


# ---------------------------------------------------------------------------
# Subcommands


def cmd_dataset_stats(args, out: IO[str]) -> int:
    records = load_gtsdb_annotations(args.gt)
    hist = class_histogram(records)
    if args.images:
        hist.image_count = len(list_ppm_images(args.images))
    if args.format == "json":
        out.write(json.dumps(hist.to_json()) + "\n")
    else:
        out.write(hist.to_csv())
    return EXIT_OK


def cmd_dataset_remap(args, out: IO[str]) -> int:
    records = load_gtsdb_annotations(args.gt)
    dropped = 0
    for r in records:
        sc = remap_to_superclass(r.raw_class_id)
        if sc is None:
            dropped += 1
            continue
        b = r.box
        out.write(json.dumps({"image": r.image_name, "class": sc.label, "raw_class": r.raw_class_id,
                              "left": b.left, "top": b.top, "right": b.right, "bottom": b.bottom})
                  + "\n")
    log.info("dropped %d unmapped records", dropped)
    return EXIT_OK


def cmd_detect(args, out: IO[str]) -> int:
    model = _load_model(args)
    cfg = _pipeline_config(args)
    paths = _input_images(args.input)

    def work(path: Path) -> list[str]:
        dets = run_detection(read_ppm(path), model, cfg.preprocess, cfg.thresholds)
        return [json.dumps(detection_record(path.name, d)) for d in dets]

    if args.threads > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            results = list(pool.map(work, paths))
    else:
        results = [work(p) for p in paths]
    for lines in results:
        _write_lines(lines, out)
    return EXIT_OK


def cmd_track(args, out: IO[str]) -> int:
    with _open_in(args.dets) as stream:
        grouped = read_detection_lines(stream)
    if args.images:
        frames = [p.name for p in _input_images(args.images)]
        missing = set(grouped) - set(frames)
        if missing:
            raise TsrkitError(f"detections for images outside --images: {sorted(missing)[:5]}")
    else:
        frames = list(grouped)
    tracker = Tracker(KalmanParams(args.q, args.r, args.v0), min_iou=args.min_iou,
                      confirm_hits=args.confirm_hits, max_misses=args.max_misses)
    for index, name in enumerate(frames, start=1):
        live = tracker.step(grouped.get(name, []))
        for t in sorted(live + tracker.removed, key=lambda t: t.id):
            b = t.box
            out.write(json.dumps({
                "frame": index, "image": name, "track_id": t.id, "status": t.status.value,
                "class": SuperClass(t.class_id).label if isinstance(t.class_id, SuperClass)
                else str(t.class_id),
                "box": [_r(b.left), _r(b.top), _r(b.right), _r(b.bottom)],
            }) + "\n")
    return EXIT_OK


def cmd_eval(args, out: IO[str]) -> int:
    gt = ground_truth_from_records(load_gtsdb_annotations(args.gt))
    with _open_in(args.dets) as stream:
        dets = read_detection_lines(stream)
    images = [p.name for p in list_ppm_images(args.images)] if args.images else None
    report = evaluate(dets, gt, conf_for_accuracy=args.conf, iou_thresh=args.iou, images=images)
    if args.format == "csv":
        out.write(report.to_csv())
    else:
        out.write(json.dumps(report.to_json()) + "\n")
    return EXIT_OK


def cmd_bench(args, out: IO[str]) -> int:
    model = _load_model(args)
    cfg = _pipeline_config(args)
    frames = _input_images(args.input)
    if args.frames:
        frames = [frames[i % len(frames)] for i in range(args.frames)]
    report = benchmark_fps(model, frames, warmup=args.warmup, threads=args.threads,
                           config=cfg.preprocess, thresholds=cfg.thresholds, host=args.host,
                           include_decode=args.include_decode)
    d = report.to_json()
    d["flops"] = count_flops(model.spec)
    out.write(json.dumps(d) + "\n")
    return EXIT_OK


def cmd_weights_inspect(args, out: IO[str]) -> int:
    spec = resolve_network_spec(args.model_cfg)
    data = Path(args.weights).read_bytes()
    header = read_header(data)
    expected = expected_size(spec, header)
    out.write(json.dumps({
        "header": {"major": header.major, "minor": header.minor, "revision": header.revision,
                   "seen": header.seen, "bytes": header.nbytes},
        "layers": layer_extents(spec, header),
        "file_bytes": len(data), "expected_bytes": expected,
    }) + "\n")
    if len(data) != expected:
        log.error("weight file has %d bytes, network needs %d", len(data), expected)
        return EXIT_DATA
    return EXIT_OK


# ---------------------------------------------------------------------------


def _model_args(p: argparse.ArgumentParser, weights_required: bool = False) -> None:
    p.add_argument("--model-cfg", required=True,
                   help=f"network config file or bundled name ({', '.join(BUNDLED_CONFIGS)})")
    p.add_argument("--weights", required=weights_required,
                   help="binary weight file (omit for seeded random weights)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tsr-kit", description="Traffic-sign detection toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    parser.commands = sub.choices

    p = sub.add_parser("dataset-stats", help="class histogram of a GTSDB annotation file")
    p.add_argument("--gt", required=True, help="GTSDB ground-truth text file")
    p.add_argument("--images", help="image directory; its .ppm count is reported")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.set_defaults(func=cmd_dataset_stats)

    p = sub.add_parser("dataset-remap", help="annotations remapped to the four superclasses")
    p.add_argument("--gt", required=True)
    p.set_defaults(func=cmd_dataset_remap)

    p = sub.add_parser("detect", help="run the detector on PPM images")
    _model_args(p)
    p.add_argument("--input", required=True, help="PPM file or directory of PPM files")
    p.add_argument("--conf", type=float, default=None, help="confidence threshold (0.25)")
    p.add_argument("--nms", type=float, default=None, help="NMS IoU threshold (0.7)")
    p.add_argument("--color-space", choices=[c.value for c in ColorSpace], default=None)
    p.add_argument("--config", help="pipeline configuration JSON")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("track", help="Kalman tracking over detect output")
    p.add_argument("--dets", default="-", help="detection JSON lines (default stdin)")
    p.add_argument("--images", help="directory defining the frame order, including empty frames")
    p.add_argument("--min-iou", type=float, default=0.3)
    p.add_argument("--confirm-hits", type=int, default=4)
    p.add_argument("--max-misses", type=int, default=3)
    p.add_argument("--q", type=float, default=1e-2, help="process noise")
    p.add_argument("--r", type=float, default=1.0, help="measurement noise")
    p.add_argument("--v0", type=float, default=100.0, help="initial velocity variance")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", help="per-class AP, mAP and recall at a fixed confidence")
    p.add_argument("--gt", required=True)
    p.add_argument("--dets", default="-", help="detection JSON lines (default stdin)")
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--conf", type=float, default=0.5, help="confidence for the recall column")
    p.add_argument("--images", help="directory listing every evaluated image")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="FPS and latency percentiles")
    _model_args(p)
    p.add_argument("--input", required=True)
    p.add_argument("--frames", type=int, default=0, help="cycle the input to this many frames")
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--host", default="", help="free-text host label")
    p.add_argument("--include-decode", action="store_true")
    p.add_argument("--conf", type=float, default=None)
    p.add_argument("--config", help="pipeline configuration JSON")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("weights-inspect", help="weight file header and per-layer byte extents")
    _model_args(p, weights_required=True)
    p.set_defaults(func=cmd_weights_inspect)
    return parser


def run_cli(argv: Sequence[str] | None = None, out: IO[str] | None = None) -> int:
    _configure_logging()
    out = out or sys.stdout
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        if extra:
            parser.commands[args.command].error(f"unrecognized arguments: {' '.join(extra)}")
        if getattr(args, "threads", 1) < 1:
            parser.error("--threads must be >= 1")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    try:
        return args.func(args, out)
    except (TsrkitError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_DATA
    except Exception:  # pragma: no cover - exercised only on bugs
        log.exception("internal error")
        return EXIT_INTERNAL


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()

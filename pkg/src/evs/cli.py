"""Command-line interface: ``evs run | flow | synth | bench``.

Exit codes: 0 success, 1 usage, 2 data or validation error, 3 internal error.
"""

from __future__ import annotations

import argparse
import json
import sys
from importlib import resources
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from ._validation import effective_n_jobs
from .disflow import DISOpticalFlow, fast_preset
from .evaluation import (
    ConfusionMatrix,
    HopEvaluator,
    TimingReport,
    inconsistency_statistics,
    iou_per_class,
    metrics_document,
    timed_probe,
    write_json,
)
from .exceptions import EVSError, PipelineError, ValidationError
from .iam import CONSISTENCY_MODES, InconsistencyAttention
from .imagery import (
    FlowField,
    LabelMap,
    ProbabilityMap,
    load_frame_sequence,
    read_flo,
    read_label_png,
    read_frame,
    read_probabilities,
    write_flo,
    write_label_png,
    write_mask_png,
)
from .pipeline import EVSPipeline, OperatingPoint, operating_point
from .propagation import TileGrid, mapping_from_flow, remap_labels
from .segmentation import OracleRefiner, PaletteSegmenter, PassthroughRefiner, PrecomputedSegmenter
from .synthgen import PALETTE_COLORS, SceneSpec, generate, random_spec, translated_pair, write_sequence

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3

# soft targets (ms) on a desktop CPU, with a fast reference implementation for scale
SOFT_TARGETS = {
    "remap": {"soft_target_ms": 5.0, "reference_ms": 0.15},
    "flow": {"soft_target_ms": 50.0, "reference_ms": 5.0},
}
STAGE_SIZES = {"flow": (2048, 1024), "remap": (2048, 1024), "iam": (512, 256), "pipeline": (512, 256)}

RUN_DEFAULTS = {
    "pattern": "frame_%06d.png", "op": None, "D": None, "S": None, "W": None, "R": None,
    "refiner": None, "gt": None, "gt_pattern": "label_%06d.png", "anchor": 0,
    "flow_size": "512x256", "pred_size": "512x256", "workers": 2, "labels": True,
    "overlays": False, "masks": False, "metrics": True, "timings": True,
    "consistency": "backward_forward", "dilation_radius": 4, "smoothing_sigma": 2.0,
    "softness": 0.5, "tiles": "4x4",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def parse_size(text):
    try:
        w, h = (int(v) for v in str(text).lower().split("x"))
    except ValueError:
        raise UsageError(f"size must look like WIDTHxHEIGHT, got {text!r}")
    if w <= 0 or h <= 0:
        raise UsageError(f"size must be positive, got {text!r}")
    return w, h


def _flag_pair(p, name, help):
    g = p.add_mutually_exclusive_group()
    g.add_argument(f"--{name}", dest=name, action="store_true", default=None, help=help)
    g.add_argument(f"--no-{name}", dest=name, action="store_false")


def build_parser():
    parser = _Parser(prog="evs", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"evs {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    run = sub.add_parser("run", help="propagate segmentation over a frame directory")
    run.add_argument("--config", help="JSON file with option defaults (flags override)")
    run.add_argument("--in", dest="input", help="frame directory")
    run.add_argument("--pattern", help="frame filename pattern (default frame_%%06d.png)")
    run.add_argument("--seg", help="palette:SCENE.json or precomputed:DIR")
    run.add_argument("--op", help="named operating point, e.g. EVS-06")
    run.add_argument("--D", type=float, help="segmenter downscale factor (0.5 or 1.0)")
    run.add_argument("--S", type=int, help="segmentation period")
    _flag_pair(run, "W", "enable warping")
    _flag_pair(run, "R", "enable refinement")
    run.add_argument("--refiner", choices=["oracle", "passthrough", "none"])
    run.add_argument("--gt", help="ground-truth label directory")
    run.add_argument("--gt-pattern", dest="gt_pattern")
    run.add_argument("--num-classes", dest="num_classes", type=int)
    run.add_argument("--anchor", type=int, help="keyframe phase offset")
    run.add_argument("--flow-size", dest="flow_size", help="flow resolution WxH")
    run.add_argument("--pred-size", dest="pred_size", help="palette segmenter prediction size WxH")
    run.add_argument("--softness", type=float)
    run.add_argument("--consistency", choices=CONSISTENCY_MODES)
    run.add_argument("--dilation-radius", dest="dilation_radius", type=int)
    run.add_argument("--smoothing-sigma", dest="smoothing_sigma", type=float)
    run.add_argument("--tiles", help="remap tile grid ROWSxCOLS")
    run.add_argument("--workers", type=int, help="worker threads (capped by EVS_THREADS)")
    run.add_argument("--out", help="output directory")
    for name, what in (("labels", "label PNGs"), ("overlays", "50/50 color overlays"),
                       ("masks", "inconsistency mask PNGs"), ("metrics", "metrics JSON"),
                       ("timings", "timing JSON")):
        _flag_pair(run, name, f"write {what}")

    flow = sub.add_parser("flow", help="estimate optical flow for a pair or a directory")
    flow.add_argument("inputs", nargs="+", help="two frame files or one frame directory")
    flow.add_argument("--out", required=True)
    flow.add_argument("--pattern", default="frame_%06d.png")
    flow.add_argument("--preset", choices=["fast"], default="fast")
    flow.add_argument("--finest-scale", dest="finest_scale", type=int)
    flow.add_argument("--patch-size", dest="patch_size", type=int)
    flow.add_argument("--iterations", type=int)
    flow.add_argument("--gt", help="directory of ground-truth flow_%%06d.flo files")
    flow.add_argument("--margin", type=int, default=8, help="border excluded from the EPE report")
    flow.add_argument("--workers", type=int, default=1)

    synth = sub.add_parser("synth", help="render a synthetic sequence from a scene spec")
    synth.add_argument("spec", help="scene JSON file, or the name of a bundled scene (crossing)")
    synth.add_argument("--out", required=True)

    bench = sub.add_parser("bench", help="time a stage")
    bench.add_argument("stage", choices=["flow", "remap", "iam", "pipeline"])
    bench.add_argument("--size", help="WxH (default depends on the stage)")
    bench.add_argument("--samples", type=int, default=300, help="retained samples")
    bench.add_argument("--warmup", type=int, default=10, help="discarded leading samples")
    bench.add_argument("--preset", choices=["fast"], default="fast")
    bench.add_argument("--tiles", default="4x4")
    bench.add_argument("--workers", type=int, default=1)
    bench.add_argument("--out", help="write the report here instead of stdout")
    bench.add_argument("--with-samples", action="store_true", help="include raw samples")
    return parser


# --------------------------------------------------------------------------
# run

def _load_config(path):
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ValidationError(f"cannot read config {path}: {exc}")
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config {path} is not valid JSON: {exc}")
    if not isinstance(data, dict):
        raise ValidationError(f"config {path} must hold a JSON object")
    data = {k.replace("-", "_"): v for k, v in data.items()}
    if "in" in data:
        data["input"] = data.pop("in")
    return data


def resolve_run_config(args, parser_defaults=RUN_DEFAULTS):
    """Merge built-in defaults, the ``--config`` file and explicit flags."""
    cfg = dict(parser_defaults)
    cfg.update({"input": None, "seg": None, "out": None, "num_classes": None})
    if args.config:
        file_cfg = _load_config(args.config)
        unknown = set(file_cfg) - set(cfg)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
        cfg.update(file_cfg)
    for key in cfg:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    for req in ("input", "seg", "out"):
        if not cfg[req]:
            raise UsageError(f"run: --{'in' if req == 'input' else req} is required")
    return cfg


def _resolve_op(cfg):
    explicit = {k: cfg[k] for k in ("D", "S", "W", "R") if cfg[k] is not None}
    if cfg["op"] is not None:
        try:
            base = operating_point(cfg["op"])
        except ValidationError as exc:
            raise UsageError(str(exc))
    elif explicit:
        base = OperatingPoint("custom", 1.0, 1, True, False)
    else:
        raise UsageError("run: give --op or explicit --D/--S/--W/--R")
    if not explicit:
        return base
    d = base.to_dict()
    d.update(explicit)
    d["name"] = base.name if base.name == "custom" else f"{base.name}*"
    return OperatingPoint(d["name"], float(d["D"]), int(d["S"]), bool(d["W"]), bool(d["R"]))


def _make_segmenter(cfg):
    kind, _, arg = str(cfg["seg"]).partition(":")
    if not arg:
        raise UsageError("--seg must be palette:SCENE.json or precomputed:DIR")
    if kind == "palette":
        scene = _read_json(arg)
        seg = PaletteSegmenter.from_scene(scene, pred_size=parse_size(cfg["pred_size"]),
                                          softness=cfg["softness"])
        colors = {k: tuple(c) for c, k in seg.palette}
        return seg, seg.classes, colors
    if kind == "precomputed":
        seg = PrecomputedSegmenter(arg)
        idx = seg.indices()
        if not idx:
            raise ValidationError(f"no probs_*.bin files in {arg}")
        num_classes = read_probabilities(seg.probs_path(idx[0])).num_classes
        return seg, num_classes, {}
    raise UsageError(f"unknown segmenter kind {kind!r}; use palette or precomputed")


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc}")
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path} is not valid JSON: {exc}")


def class_colors(num_classes, known=None):
    """Deterministic overlay color per class id."""
    known = known or {}
    out = np.zeros((256, 3), dtype=np.uint8)
    for c in range(256):
        out[c] = known.get(c, PALETTE_COLORS[c % len(PALETTE_COLORS)])
    return out


def overlay(frame, labels, colors):
    """50/50 blend of the frame and the class colors."""
    col = colors[labels.labels.astype(np.intp)]
    return ((frame.pixels.astype(np.uint16) + col) // 2).astype(np.uint8)


def cmd_run(args):
    cfg = resolve_run_config(args)
    op = _resolve_op(cfg)
    frames = load_frame_sequence(cfg["input"], cfg["pattern"])
    segmenter, num_classes, known_colors = _make_segmenter(cfg)
    if cfg["num_classes"]:
        num_classes = int(cfg["num_classes"])

    gt_dir = Path(cfg["gt"]) if cfg["gt"] else None
    gt_cache = {}

    def ground_truth(index):
        if gt_dir is None:
            return None
        if index not in gt_cache:
            path = gt_dir / (cfg["gt_pattern"] % index)
            gt_cache[index] = read_label_png(path, num_classes) if path.is_file() else None
        return gt_cache[index]

    refiner_kind = cfg["refiner"] or ("oracle" if op.R and gt_dir else "none")
    if refiner_kind == "oracle":
        if gt_dir is None:
            raise UsageError("--refiner oracle needs --gt")
        refiner = OracleRefiner(ground_truth)
    elif refiner_kind == "passthrough":
        refiner = PassthroughRefiner()
    else:
        refiner = None
    if op.R and refiner is None:
        raise UsageError(f"{op.name} enables refinement; choose --refiner oracle or passthrough")

    tr, tc = parse_size(cfg["tiles"])
    iam = InconsistencyAttention(dilation_radius=cfg["dilation_radius"],
                                 smoothing_sigma=cfg["smoothing_sigma"],
                                 consistency=cfg["consistency"])
    pipe = EVSPipeline(segmenter, refiner, op, iam=iam, flow_size=parse_size(cfg["flow_size"]),
                       anchor=cfg["anchor"], n_workers=effective_n_jobs(cfg["workers"]),
                       tiles=TileGrid(tr, tc), compute_mask=bool(cfg["masks"]))

    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    colors = class_colors(num_classes, known_colors)
    for sub, on in (("labels", cfg["labels"]), ("overlays", cfg["overlays"]), ("masks", cfg["masks"])):
        if on:
            (out / sub).mkdir(exist_ok=True)

    hop_eval = HopEvaluator(num_classes)
    total = ConfusionMatrix(num_classes)
    stage_samples = {}
    mask_results = []
    scored = 0
    by_index = {f.frame_index: f for f in frames}
    for r in pipe.process(frames):
        i = r.index
        if cfg["labels"]:
            write_label_png(out / "labels" / f"label_{i:06d}.png", r.labels)
        if cfg["overlays"]:
            Image.fromarray(overlay(by_index[i], r.labels, colors), mode="RGB").save(
                out / "overlays" / f"overlay_{i:06d}.png")
        if cfg["masks"] and r.mask is not None:
            write_mask_png(out / "masks" / f"mask_{i:06d}.png", r.mask)
        if r.raw_mask is not None:
            mask_results.append(r)
        for stage, ms in r.timings.items():
            stage_samples.setdefault(stage, []).append(ms)
        gt = ground_truth(i)
        if gt is not None:
            if (gt.width, gt.height) != (r.labels.width, r.labels.height):
                raise ValidationError(
                    f"ground truth for frame {i} is {gt.width}x{gt.height}, "
                    f"frames are {r.labels.width}x{r.labels.height}")
            total.accumulate(r.labels, gt)
            hop_eval.add(r.hops, r.labels, gt)
            scored += 1

    summary = {"op": op.to_dict(), "frames": len(frames)}
    if cfg["metrics"] and total.total > 0:
        iou = iou_per_class(total)
        stats = inconsistency_statistics(mask_results) if mask_results else None
        doc = metrics_document(iou, hop_eval.miou_by_hop(), stats,
                               extra={"op": op.to_dict(), "frames": len(frames),
                                      "scored_frames": scored, "scored_pixels": total.total})
        write_json(out / "metrics.json", doc)
        summary["miou"] = iou.miou
    if cfg["timings"]:
        reports = [TimingReport(s, v).to_dict() for s, v in sorted(stage_samples.items())]
        write_json(out / "timings.json", {"schema": "evs.timings", "schema_version": 1,
                                          "stages": reports})
    msg = f"{op.name}: {len(frames)} frames -> {out}"
    if "miou" in summary:
        msg += f" (mIoU {summary['miou']:.4f})"
    print(msg)
    return EXIT_OK


# --------------------------------------------------------------------------
# flow

def _flow_estimator(args):
    p = fast_preset()
    return DISOpticalFlow(
        finest_scale=p.finest_scale if args.finest_scale is None else args.finest_scale,
        patch_size=p.patch_size if args.patch_size is None else args.patch_size,
        gd_iterations=p.gd_iterations if args.iterations is None else args.iterations,
        n_jobs=effective_n_jobs(args.workers))


def cmd_flow(args):
    if len(args.inputs) == 1:
        frames = load_frame_sequence(args.inputs[0], args.pattern)
    elif len(args.inputs) == 2:
        frames = [read_frame(p, i) for i, p in enumerate(args.inputs)]
    else:
        raise UsageError("flow: give two frame files or one directory")
    if len(frames) < 2:
        raise ValidationError("need at least two frames to estimate flow")
    est = _flow_estimator(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = []
    for a, b in zip(frames, frames[1:]):
        flow = est.estimate(a, b)
        write_flo(out / f"flow_{a.frame_index:06d}.flo", flow)
        if args.gt:
            gt_path = Path(args.gt) / f"flow_{a.frame_index:06d}.flo"
            if gt_path.is_file():
                report.append({"frame": a.frame_index,
                               "epe_interior": interior_epe(flow, read_flo(gt_path), args.margin)})
    print(f"wrote {len(frames) - 1} flow files to {out}")
    if args.gt:
        if not report:
            raise ValidationError(f"no ground-truth flow files found in {args.gt}")
        mean = float(np.mean([r["epe_interior"] for r in report]))
        write_json(out / "epe.json", {"schema": "evs.epe", "schema_version": 1,
                                      "margin": args.margin, "mean_epe": mean, "pairs": report})
        print(f"interior mean EPE {mean:.4f} px over {len(report)} pairs")
    return EXIT_OK


def interior_epe(flow, gt, margin=8):
    if (flow.width, flow.height) != (gt.width, gt.height):
        raise ValidationError("estimated and ground-truth flow differ in size")
    epe = flow.endpoint_error(gt)
    m = int(margin)
    inner = epe[m:epe.shape[0] - m, m:epe.shape[1] - m] if m else epe
    if inner.size == 0:
        raise ValidationError(f"margin {m} leaves no interior pixels")
    return float(inner.mean())


# --------------------------------------------------------------------------
# synth

def bundled_scene(name):
    ref = resources.files("evs") / "data" / f"{name}.json"
    if not ref.is_file():
        return None
    return json.loads(ref.read_text())


def cmd_synth(args):
    path = Path(args.spec)
    if path.is_file():
        data = _read_json(path)
    else:
        data = bundled_scene(args.spec)
        if data is None:
            raise ValidationError(f"no such scene file or bundled scene: {args.spec}")
    data = {k: v for k, v in data.items() if k not in ("palette",)}
    spec = SceneSpec.from_dict(data)
    seq = generate(spec)
    write_sequence(seq, args.out)
    print(f"wrote {len(seq)} frames to {args.out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# bench

def _bench_stage(stage, size, tiles, workers):
    w, h = size
    if stage == "flow":
        a, b = translated_pair(w, h, 3, -2, seed=1)
        est = DISOpticalFlow(n_jobs=workers)
        meta = {"preset": {"finest_scale": 2, "patch_size": 8, "gd_iterations": 12,
                           "use_variational_refinement": False}}
        return (lambda: est.estimate(a, b)), meta
    if stage == "remap":
        rng = np.random.default_rng(0)
        labels = LabelMap(rng.integers(0, 19, (h, w)).astype(np.uint8), 19)
        mapping = mapping_from_flow(FlowField.uniform(w, h, 2.5, -1.5))
        mapping.flat_index   # precomputed outside the timed region
        return (lambda: remap_labels(labels, mapping, tiles, workers)), {}
    if stage == "iam":
        a, b = translated_pair(w, h, 2, 0, seed=2)
        est = DISOpticalFlow()
        fwd, bwd = est.estimate_pair(a, b)
        rng = np.random.default_rng(1)
        lab = LabelMap((np.arange(w)[None, :] // 32 % 4 + np.zeros((h, 1), int)).astype(np.uint8), 4)
        p = rng.random((h, w, 4))
        p /= p.sum(axis=2, keepdims=True)
        pw, pr = ProbabilityMap(p), ProbabilityMap(p[..., ::-1].copy())
        iam = InconsistencyAttention(working_size=(w, h))

        def run():
            _, m = iam.mask(lab, fwd, bwd, tiles, workers)
            iam.blend(pr, pw, m)
        return run, {}
    if stage == "pipeline":
        seq = generate(random_spec(0, w, h, 10))
        seg = PaletteSegmenter(seq.palette(), num_classes=seq.spec.classes, pred_size=(w, h),
                               feature_size=(max(1, w // 4), max(1, h // 4)))
        pipe = EVSPipeline(seg, OracleRefiner(seq.labels), "EVS-06", flow_size=(w, h),
                           n_workers=1, tiles=tiles)
        state = {"it": iter(())}

        def run():
            try:
                next(state["it"])
            except StopIteration:
                state["it"] = iter(pipe.process(seq.frames))
                next(state["it"])
        return run, {"op": "EVS-06", "note": "per-frame latency, cycling a 10-frame sequence"}
    raise UsageError(f"unknown stage {stage!r}")


def cmd_bench(args):
    size = parse_size(args.size) if args.size else STAGE_SIZES[args.stage]
    if args.samples < 1:
        raise UsageError("--samples must be >= 1")
    if args.warmup < 0:
        raise UsageError("--warmup must be >= 0")
    tr, tc = parse_size(args.tiles)
    workers = effective_n_jobs(args.workers)
    fn, meta = _bench_stage(args.stage, size, TileGrid(tr, tc), workers)
    report = timed_probe(fn, samples=args.samples + args.warmup, warmup=args.warmup,
                         stage=args.stage)
    doc = report.to_dict(include_samples=args.with_samples)
    doc.update(meta)
    doc.update({"size": f"{size[0]}x{size[1]}", "workers": workers,
                "schema": "evs.timing", "schema_version": 1})
    target = SOFT_TARGETS.get(args.stage)
    if target:
        doc.update(target)
        doc["within_soft_target"] = report.median <= target["soft_target_ms"]
    text = json.dumps(doc, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text if not args.out else
          f"{args.stage}: median {report.median:.3f} ms over {report.count} samples -> {args.out}")
    return EXIT_OK


# --------------------------------------------------------------------------

COMMANDS = {"run": cmd_run, "flow": cmd_flow, "synth": cmd_synth, "bench": cmd_bench}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except PipelineError as exc:
        cause = exc.__cause__
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA if cause is None or isinstance(cause, EVSError) else EXIT_INTERNAL
    except (EVSError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except SystemExit as exc:   # --help / --version
        return int(exc.code or 0)
    except Exception as exc:    # noqa: BLE001
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())

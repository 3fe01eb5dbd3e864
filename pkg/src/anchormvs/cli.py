"""Command-line interface: ``mvs <command> [options]``.

Errors are reported on stderr as one JSON object ``{"error", "message"}``
with exit status 1; usage errors exit with status 2.  ``MVS_LOG`` selects
the log level (error, warning, info, debug).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import re
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

log = logging.getLogger("anchormvs")

LOG_LEVELS = {"error": logging.ERROR, "warning": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _levels(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _fraction(text: str) -> float:
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"expected a value in [0, 1], got {text}")
    return v


def _corruption(args, base=None):
    from dataclasses import replace
    from .prompt import PromptCorruption
    base = base or PromptCorruption()
    beams = None if args.beams is not None and args.beams <= 0 else args.beams
    kw = {"beams": beams if args.beams is not None else base.beams,
          "radial_noise_sigma": args.noise if args.noise is not None else base.radial_noise_sigma,
          "dropout_fraction": args.dropout if args.dropout is not None else base.dropout_fraction,
          "occlusion_from_bottom": args.occlude if args.occlude is not None else base.occlusion_from_bottom}
    if getattr(args, "outliers", None) is not None:
        kw["outlier_fraction"] = args.outliers
    return replace(base, **kw)


def _add_corruption_flags(p, default_beams=16):
    p.add_argument("--beams", type=int, default=default_beams, help="virtual LiDAR beams (0 = dense prompts)")
    p.add_argument("--noise", type=float, default=None, help="radial noise sigma in meters")
    p.add_argument("--dropout", type=_fraction, default=None, help="fraction of prompt points dropped")
    p.add_argument("--occlude", type=_fraction, default=None, help="fraction of rows removed from the bottom")
    p.add_argument("--outliers", type=_fraction, default=None, help="fraction of points replaced by outliers")


def _load_model(ckpt: str, config: str | None):
    from .pipeline import Model, PipelineConfig
    ckpt = Path(ckpt)
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    cfg_path = Path(config) if config else ckpt.parent / "config.json"
    if not cfg_path.exists():
        raise FileNotFoundError(f"config not found: {cfg_path} (pass --config)")
    model = Model(PipelineConfig.load(cfg_path))
    model.load(ckpt)
    return model


def _write_json(path, data) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _read_depth_dir(directory: Path) -> list[tuple[str, np.ndarray]]:
    """Depth maps of a sequence directory or a flat directory of ``frame_XXXX.pfm`` files."""
    from .pfm import read_pfm
    if not directory.is_dir():
        raise FileNotFoundError(f"directory not found: {directory}")
    frames = sorted(p for p in directory.glob("frame_*") if p.is_dir())
    if frames:
        return [(p.name, read_pfm(p / "depth.pfm").astype(np.float64)) for p in frames]
    files = sorted(p for p in directory.glob("frame_*.pfm") if re.fullmatch(r"frame_\d+", p.stem))
    if not files:
        raise FileNotFoundError(f"no frame_*.pfm depth maps or frame_* folders in {directory}")
    return [(p.stem, read_pfm(p).astype(np.float64)) for p in files]


def _read_poses(directory: Path, names: list[str]):
    from .geometry import read_cameras
    single = directory / "cameras.json"
    if single.exists():
        cams = read_cameras(single)
        return cams[0][0], [p for _, p in cams]
    cams = [read_cameras(directory / n / "camera.json")[0] for n in names]
    return cams[0][0], [p for _, p in cams]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    from .synthdata import default_scene, plane_scene, render, save_sequence
    corr = _corruption(args)
    if args.scene == "plane":
        spec = plane_scene(args.width, args.height, frames=args.frames, seed=args.seed, d_min=args.d_min,
                           d_max=args.d_max, num_sources=args.num_sources, corruption=corr)
    else:
        spec = default_scene(args.width, args.height, frames=args.frames, kind=args.kind, seed=args.seed,
                             d_min=args.d_min, d_max=args.d_max, num_sources=args.num_sources, corruption=corr)
    bundles = render(spec, jobs=args.jobs)
    save_sequence(bundles, args.out, spec)
    log.info("wrote %d frames to %s", len(bundles), args.out)
    return 0


def cmd_synth_prompt(args) -> int:
    from .synthdata import load_sequence, reprompt, save_sequence, sequence_bounds
    bundles = load_sequence(args.seq)
    d_min, d_max = sequence_bounds(args.seq) or (1.0, 100.0)
    out = reprompt(bundles, _corruption(args), args.seed, d_min, d_max)
    save_sequence(out, args.out)
    meta = json.loads((Path(args.seq) / "seq.json").read_text())
    new_meta = json.loads((Path(args.out) / "seq.json").read_text())
    for key in ("scene", "d_min", "d_max"):
        if key in meta:
            new_meta[key] = meta[key]
    new_meta["prompt_seed"] = args.seed
    (Path(args.out) / "seq.json").write_text(json.dumps(new_meta, indent=1))
    return 0


def cmd_train(args) -> int:
    from .pipeline import PipelineConfig, train
    from .synthdata import load_sequence
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.total_steps is not None:
        cfg.train.steps = args.total_steps
    sequences = [load_sequence(s) for s in args.seq]
    every = max(cfg.train.steps // 20, 1)

    def progress(row):
        if row["step"] % every == 0:
            log.info("step %d total %.5f depth %.5f temporal %.5f", row["step"], row["total"],
                     row["depth"], row["temporal"])

    result = train(cfg, sequences, out_dir=args.out, resume=args.resume, steps=args.steps, progress=progress)
    log.info("finished in %.1f s; checkpoint %s", result.seconds, result.checkpoint)
    return 0


def cmd_infer(args) -> int:
    from .cost_volume import CostVolume, dump_cost_volume
    from .autodiff import Tensor
    from .pfm import write_pfm
    from .prompt import Availability
    from .synthdata import load_sequence
    model = _load_model(args.ckpt, args.config)
    bundles = load_sequence(args.seq)
    availability = None if args.availability == "both" else (
        "none" if args.availability == "none" else Availability(args.availability))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    window = model.cfg.train.window
    for start in range(0, len(bundles), window):
        chunk = bundles[start:start + window]
        res = model.forward(chunk, [availability] * len(chunk))
        for k, b in enumerate(chunk):
            stem = f"frame_{b.index:04d}"
            write_pfm(out / f"{stem}.pfm", res.depths[0].data[k])
            if args.dump_scales:
                for s, d in zip((2, 4, 8), res.depths[1:]):
                    write_pfm(out / f"{stem}_s{s}.pfm", d.data[k])
            if args.dump_cost_volume:
                cv = CostVolume(Tensor(res.volume[k]), model.hyp)
                dump_cost_volume(cv, out / f"{stem}_cv.pfm")
    return 0


def cmd_eval(args) -> int:
    from .objectives import DepthMap, aggregate, image_metrics, tae
    gt_dir = Path(args.gt)
    gts = _read_depth_dir(gt_dir)
    preds = dict(_read_depth_dir(Path(args.pred)))
    missing = [n for n, _ in gts if n not in preds]
    if missing:
        raise FileNotFoundError(f"predictions missing for {missing[:5]}{'...' if len(missing) > 5 else ''}")
    items = [(preds[n], DepthMap(g, g > 0), n) for n, g in gts]
    if args.jobs > 1:
        with ThreadPoolExecutor(args.jobs) as ex:
            per = list(ex.map(lambda it: image_metrics(*it), items))
    else:
        per = [image_metrics(*it) for it in items]
    tae_value = None
    cams_dir = Path(args.cams) if args.cams else (gt_dir if (gt_dir / "seq.json").exists() else None)
    if cams_dir is not None and len(gts) >= 2:
        intr, poses = _read_poses(cams_dir, [n for n, _ in gts])
        tae_value = tae([preds[n] for n, _ in gts], poses, intr)
    report = aggregate(per, tae_value)
    _write_json(args.out, report.to_dict())
    print(json.dumps(report.mean, sort_keys=True))
    return 0


def cmd_gradcheck(args) -> int:
    from .checks import CHECKS, run_checks
    if args.list:
        for c in CHECKS:
            print(f"{c.name}\t{c.tolerance:.0e}")
        return 0
    if not args.all and not args.check:
        raise UsageError("pass --all or at least one --check NAME")
    results = run_checks(None if args.all else args.check)
    failed = 0
    for _, report in results:
        print(str(report))
        failed += not report.passed
    print(f"{len(results) - failed}/{len(results)} gradient checks passed")
    return 0 if failed == 0 else 1


def cmd_sweep(args) -> int:
    from .pipeline import sweep
    from .synthdata import load_sequence
    model = _load_model(args.ckpt, args.config)
    bundles = load_sequence(args.seq)
    rows = sweep(model, bundles, args.axis, args.levels, seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["axis", "level", "mae", "absrel", "tau"])
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    if args.svg:
        from .plot import line_chart
        Path(args.svg).write_text(line_chart([r["level"] for r in rows], [r["absrel"] for r in rows],
                                             xlabel=args.axis, ylabel="AbsRel",
                                             title=f"AbsRel vs {args.axis}"))
    return 0


def cmd_overfit(args) -> int:
    from .pipeline import run_overfit
    every = max(args.steps // 20, 1)

    def progress(row):
        if row["step"] % every == 0:
            log.info("step %d total %.5f temporal %.6f", row["step"], row["total"], row["temporal"])

    report = run_overfit(args.out, seed=args.seed, steps=args.steps, progress=progress)
    print(json.dumps(report, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mvs", description="Prompt-anchored multi-view stereo toolkit.")
    sub = ap.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("synth", help="render a synthetic sequence")
    p.add_argument("--out", required=True)
    p.add_argument("--scene", choices=["default", "plane"], default="default")
    p.add_argument("--kind", choices=["translate", "orbit", "static", "low_parallax"], default="translate")
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=48)
    p.add_argument("--frames", type=int, default=4)
    p.add_argument("--num-sources", type=int, default=4)
    p.add_argument("--d-min", type=float, default=1.0)
    p.add_argument("--d-max", type=float, default=20.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    _add_corruption_flags(p)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("synth-prompt", help="re-synthesize prompts of a sequence from its ground truth")
    p.add_argument("--seq", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_corruption_flags(p)
    p.set_defaults(fn=cmd_synth_prompt)

    p = sub.add_parser("train", help="train on one or more sequences")
    p.add_argument("--seq", required=True, action="append")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--steps", type=int, default=None, help="steps to run in this invocation")
    p.add_argument("--total-steps", type=int, default=None, help="schedule length (overrides the config)")
    p.add_argument("--resume")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("infer", help="predict depth for a sequence")
    p.add_argument("--seq", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--availability", choices=["both", "reference_only", "sources_only", "none"], default="both")
    p.add_argument("--dump-scales", action="store_true", help="also write the 1/2, 1/4 and 1/8 outputs")
    p.add_argument("--dump-cost-volume", action="store_true")
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("eval", help="score predicted depth maps against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--cams")
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="run finite-difference gradient checks")
    p.add_argument("--all", action="store_true")
    p.add_argument("--check", action="append")
    p.add_argument("--list", action="store_true")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("sweep", help="AbsRel across prompt corruption levels")
    p.add_argument("--axis", required=True, choices=["beams", "occlusion", "dropout"])
    p.add_argument("--levels", required=True, type=_levels)
    p.add_argument("--seq", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--svg")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("overfit", help="train the desk model on one scene and report")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_overfit)
    return ap


def _configure_logging() -> None:
    level = os.environ.get("MVS_LOG", "warning").lower()
    if level not in LOG_LEVELS:
        raise UsageError(f"MVS_LOG must be one of {sorted(LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level], stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s", force=True)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:        # usage errors (2) and --help (0)
        return int(exc.code or 0)
    try:
        _configure_logging()
        return args.fn(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(json.dumps({"error": "UsageError", "message": str(exc)}), file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - reported as JSON
        log.debug("command failed", exc_info=True)
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

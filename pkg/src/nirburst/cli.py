"""Command-line interface: ``nirburst <command> ...``.

Exit codes: 0 success, 1 ingest / runtime error, 2 configuration error,
3 diverged optimization.  Configuration precedence is total: command-line
flags override the ``--config`` file, which overrides the task recipe.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__
from .config import (SEPARATION_TASKS, TaskConfig, apply_overrides, default_recipe,
                     read_flat_config, to_flat)
from .errors import ConfigError, DivergedError, NirError, UsageError
from .imaging import (LAYER_SUFFIXES, find_bursts, load_burst, load_tensor, read_png,
                      save_image)
from .model import SeparationModel
from .motion import project_points, relative_homography

log = logging.getLogger("nirburst")

CORNERS = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])
MOTION_FLAGS = {"homography": "homography", "flow": "flow", "flow-w": "flow_w"}


# ---------------------------------------------------------------- helpers


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _thread_limit():
    """Context capping BLAS threads at ``NIR_THREADS`` when it is set."""
    value = os.environ.get("NIR_THREADS")
    if not value:
        return nullcontext()
    try:
        n = int(value)
        if n < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(f"NIR_THREADS must be a positive integer, got {value!r}") from None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def _flag_overrides(args) -> dict:
    """Flags mirrored one-to-one onto flat config keys."""
    pairs = {
        "train.iterations": args.iterations,
        "train.seed": args.seed,
        "train.lr": args.lr,
        "train.batch_fraction": args.batch_fraction,
        "train.precision": args.precision,
        "train.checkpoint_every": args.checkpoint_every,
        "weights.interf": args.lambda_interf,
        "weights.tvflow": args.lambda_tvflow,
        "weights.excl": args.lambda_excl,
        "weights.w": args.lambda_w,
    }
    if getattr(args, "motion", None):
        pairs["motion.kind"] = MOTION_FLAGS[args.motion]
    if getattr(args, "cfa", None):
        pairs["data.cfa"] = args.cfa
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        pairs[key.strip()] = value.strip()
    return {k: v for k, v in pairs.items() if v is not None}


def resolve_config(task, args, manifest=None) -> TaskConfig:
    """Recipe (or manifest) <- config file <- flags."""
    if manifest is not None:
        cfg = TaskConfig.from_dict(manifest["config"])
    else:
        cfg = default_recipe(task, occlusion_aware=getattr(args, "occlusion_aware", False))
    if args.config:
        values = read_flat_config(args.config)
        named = values.pop("task.name", None)
        if named is not None and named != cfg.task:
            raise ConfigError(f"config file is for task {named!r}, not {cfg.task!r}")
        cfg = apply_overrides(cfg, values)
    return apply_overrides(cfg, _flag_overrides(args))


def _read_manifest(path):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read manifest {path}: {exc}") from exc


def _ground_truth(path):
    """Scene (and motion, if present) tensors from a synth output directory."""
    root = Path(path)
    if (root / "ground_truth").is_dir():
        root = root / "ground_truth"
    gt = {"scene": load_tensor(root / "scene.nirt").astype(np.float64)}
    if (root / "motion.nirt").exists():
        gt["motion"] = load_tensor(root / "motion.nirt").astype(np.float64)
    return gt


# ---------------------------------------------------------------- outputs


def canonical_render(model: SeparationModel, window=None, scale=1.0):
    window = tuple(window) if window is not None else model.default_window()
    res = model.default_canvas(window, scale)
    return model.render_canonical(window, res), window, res


def write_layers(model: SeparationModel, out_dir: Path, stems, scale=1.0):
    """Per-frame ``_scene`` / ``_interf`` / ``_alpha`` images; returns float renders."""
    cfg = model.config
    T, H, W = model.frame_shape
    res = (max(1, int(round(H * scale))), max(1, int(round(W * scale))))
    interf_norm = ("signed" if cfg.interf_net is not None and cfg.interf_net.output_head == "tanh_signed"
                   else "unit")
    layer_dir = out_dir / "layers"
    renders = []
    for k in range(T):
        r = model.render_frame_index(k, res)
        save_image(r["scene"], layer_dir / f"{stems[k]}{LAYER_SUFFIXES['scene']}.png", cfg.normalization)
        if "interf" in r:
            save_image(r["interf"], layer_dir / f"{stems[k]}{LAYER_SUFFIXES['interf']}.png", interf_norm)
        if "alpha" in r:
            save_image(r["alpha"], layer_dir / f"{stems[k]}{LAYER_SUFFIXES['alpha']}.png", "unit")
        renders.append(r)
    return renders


def _scene_metrics(renders, gt, normalization):
    from .metrics import evaluate
    scene = gt["scene"]
    if scene.shape[0] != len(renders) or scene.shape[1:3] != renders[0]["scene"].shape[:2]:
        raise UsageError("ground truth does not match the burst dimensions")
    lo, hi = (-1.0, 1.0) if normalization == "signed" else (0.0, 1.0)
    rows = []
    for k, r in enumerate(renders):
        rep = evaluate(scene[k], np.clip(r["scene"], lo, hi), normalization)
        rows.append(rep.as_record(frame=k, stream="scene"))
    return rows


def _motion_error(model, gt, width, height):
    """Max corner displacement (pixels) between fitted and true frame-to-frame-0 maps."""
    Ms = model.frame_homographies()
    errs = []
    for k in range(1, len(Ms)):
        d = project_points(relative_homography(Ms[k], Ms[0]), CORNERS) - project_points(gt[k], CORNERS)
        d = d * np.array([width / 2.0, height / 2.0])
        errs.append(float(np.max(np.linalg.norm(d, axis=1))))
    return errs


def finish_outputs(model, out_dir: Path, name, stems, window=None, scale=1.0, gt=None):
    """Render every output of a fitted model; returns manifest fragments."""
    cfg = model.config
    renders = write_layers(model, out_dir, stems)
    canon, window, res = canonical_render(model, window, scale)
    save_image(canon, out_dir / f"{name}{LAYER_SUFFIXES['canonical']}.png", cfg.normalization)
    info = {"canonical": {"window": [float(v) for v in window], "resolution": list(res)}}
    if cfg.motion_kind == "homography":
        info["homographies"] = [m.tolist() for m in model.frame_homographies()]
    if gt is not None:
        rows = _scene_metrics(renders, gt, cfg.normalization)
        info["metrics"] = rows
        with open(out_dir / "metrics.jsonl", "w") as fh:
            for row in rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
        if "motion" in gt and cfg.motion_kind == "homography":
            T, H, W = model.frame_shape
            info["motion_error_px"] = _motion_error(model, gt["motion"], W, H)
    return info


def _write_manifest(out_dir: Path, payload, wall):
    outputs = sorted(p for p in out_dir.rglob("*")
                     if p.is_file() and p.suffix in (".png", ".nirw", ".jsonl", ".txt")
                     and p.parent.name != "figures" and p.name != "train_log.jsonl")
    payload["outputs"] = {str(p.relative_to(out_dir)): _sha256(p) for p in outputs}
    payload["timing"] = "timing.json"
    (out_dir / "manifest.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    (out_dir / "timing.json").write_text(json.dumps({"wall_seconds": round(wall, 3)}) + "\n")


# ------------------------------------------------------------- fit runner


def run_job(command, cfg: TaskConfig, input_dir, out_dir, *, window=None, scale=1.0,
            ground_truth=None, figures=True, quiet=False):
    """Fit one burst and write all outputs under ``out_dir``."""
    from .trainer import fit

    t0 = time.perf_counter()
    seq = load_burst(input_dir, cfg.normalization, cfg.cfa, cfg.black_level, cfg.white_level)
    gt = _ground_truth(ground_truth) if ground_truth else None
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "train_log.jsonl"
    log_path.unlink(missing_ok=True)
    (out_dir / "config.txt").write_text(to_flat(cfg))
    every = max(1, cfg.iterations // 10)

    def progress(rec):
        if not quiet and (rec["step"] % every == 0 or rec["step"] == cfg.iterations - 1):
            log.info("%s step %d loss %.6g", Path(input_dir).name, rec["step"], rec["total"])

    ckpt = out_dir / "checkpoint" if cfg.checkpoint_every else None
    with _thread_limit():
        model, records = fit(seq, cfg, log_path=log_path, checkpoint_dir=ckpt, progress=progress)
        model.save(out_dir / "model")
        stems = [Path(f).stem for f in seq.filenames] or [f"frame_{k:03d}" for k in range(seq.T)]
        info = finish_outputs(model, out_dir, Path(input_dir).name, stems, window, scale, gt)
    final = {k: v for k, v in records[-1].items() if k != "wall"}
    payload = {
        "tool": "nirburst",
        "version": __version__,
        "command": command,
        "input": str(input_dir),
        "output": ".",
        "ground_truth": str(ground_truth) if ground_truth else None,
        "seed": cfg.seed,
        "frames": list(seq.filenames),
        "config": cfg.to_dict(),
        "final_losses": final,
        **info,
    }
    _write_manifest(out_dir, payload, time.perf_counter() - t0)
    if figures:
        from .report import render_report
        render_report(out_dir)
    return payload


def _job_entry(kwargs):
    try:
        run_job(**kwargs)
        return 0, None
    except NirError as exc:
        return exc.exit_code, str(exc)


def _run_fit_command(command, task, args):
    manifest = _read_manifest(args.manifest) if args.manifest else None
    cfg = resolve_config(task, args, manifest)
    input_dir = args.input or (manifest or {}).get("input")
    if input_dir is None:
        raise UsageError("--input is required")
    if args.ground_truth is None and manifest is not None:
        args.ground_truth = manifest.get("ground_truth")
    bursts = find_bursts(input_dir)
    out = Path(args.output)
    jobs = []
    for i, burst in enumerate(bursts):
        job_cfg = cfg if len(bursts) == 1 else apply_overrides(cfg, {"train.seed": cfg.seed + i})
        jobs.append(dict(command=command, cfg=job_cfg, input_dir=str(burst),
                         out_dir=str(out if len(bursts) == 1 else out / burst.name),
                         window=getattr(args, "window", None), scale=getattr(args, "scale", 1.0),
                         ground_truth=args.ground_truth if len(bursts) == 1 else None,
                         figures=not args.no_figures, quiet=args.quiet))
    if len(jobs) == 1 or args.jobs <= 1:
        for job in jobs:
            run_job(**job)
        return 0
    code = 0
    with ProcessPoolExecutor(max_workers=args.jobs) as pool:
        for job, (rc, msg) in zip(jobs, pool.map(_job_entry, jobs)):
            if rc:
                print(f"error: {job['input_dir']}: {msg}", file=sys.stderr)
                code = max(code, rc)
    return code


# ---------------------------------------------------------------- commands


def cmd_separate(args):
    return _run_fit_command("separate", args.task, args)


def cmd_fuse(args):
    if args.scale <= 0:
        raise ConfigError("--scale must be positive")
    task = "sr_demosaic" if args.cfa else "fuse"
    if args.motion is None:
        args.motion = "homography"
    return _run_fit_command("fuse", task, args)


def cmd_render(args):
    model = SeparationModel.load(args.model)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    T = model.frame_shape[0]
    stems = [f"frame_{k:03d}" for k in range(T)]
    with _thread_limit():
        if not args.canonical_only:
            write_layers(model, out, stems)
        canon, window, res = canonical_render(model, args.window, args.scale)
    save_image(canon, out / f"{args.name}{LAYER_SUFFIXES['canonical']}.png", model.config.normalization)
    print(json.dumps({"window": list(window), "resolution": list(res)}))
    return 0


def cmd_synth(args):
    from .synth import SynthSpec, generate, write_burst
    given = {"T": args.frames, "H": args.height, "W": args.width, "max_shift": args.max_shift,
             "projective": args.projective, "amplitude": args.amplitude, "density": args.density,
             "streak_length": args.streak_length, "interference": args.interference,
             "band_frequency": args.band_frequency, "overlap": args.overlap,
             "texture_size": args.texture_size, "texture_scale": args.texture_scale,
             "texture_path": args.texture}
    spec = SynthSpec(kind=args.kind, seed=args.seed, **{k: v for k, v in given.items() if v is not None})
    seq, gt = generate(spec)
    write_burst(seq, gt, args.out, spec)
    print(json.dumps({"out": str(args.out), "kind": spec.kind, "frames": seq.T,
                      "normalization": seq.normalization}))
    return 0


def _image_files(directory):
    d = Path(directory)
    if not d.is_dir():
        from .errors import IngestError
        raise IngestError(f"directory {d} does not exist")
    return sorted(p for p in d.iterdir() if p.suffix.lower() == ".png")


def cmd_metrics(args):
    from .metrics import evaluate
    ref, test = _image_files(args.ref), _image_files(args.test)
    if not ref or len(ref) != len(test):
        raise UsageError(f"need matching non-empty PNG sets, got {len(ref)} and {len(test)}")
    rows = []
    for a, b in zip(ref, test):
        rep = evaluate(read_png(a) / 255.0, read_png(b) / 255.0)
        rows.append(rep.as_record(sequence=Path(args.ref).name, stream=a.stem))
    lines = [json.dumps(r, sort_keys=True) for r in rows]
    print("\n".join(lines))
    if args.output:
        Path(args.output).write_text("\n".join(lines) + "\n")
    return 0


def cmd_gradcheck(args):
    from .gradcheck import run_suite
    results, seconds = run_suite(seed=args.seed, extensive=args.extensive)
    failed = [r for r in results if not r.passed]
    for r in results:
        print(f"{'ok  ' if r.passed else 'FAIL'} {r.name:<48} probes={r.probes:<3} "
              f"max_rel_err={r.max_rel_err:.3e}")
    print(f"{len(results) - len(failed)}/{len(results)} checks passed in {seconds:.2f} s")
    return 1 if failed else 0


def cmd_report(args):
    from .report import render_report
    for path in render_report(args.run, args.out):
        print(path)
    return 0


# ------------------------------------------------------------------ parser


def _add_fit_flags(p):
    p.add_argument("--input", help="burst directory (or a directory of burst directories)")
    p.add_argument("--output", required=True, help="output directory")
    p.add_argument("--config", help="flat 'section.key = value' config file")
    p.add_argument("--manifest", help="re-run the configuration recorded in a manifest")
    p.add_argument("--seed", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-fraction", type=float)
    p.add_argument("--precision", choices=("float32", "float64"))
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--lambda-interf", type=float)
    p.add_argument("--lambda-tvflow", type=float)
    p.add_argument("--lambda-excl", type=float)
    p.add_argument("--lambda-w", type=float)
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="any flat config key (repeatable)")
    p.add_argument("--ground-truth", help="synth output directory to score the scene against")
    p.add_argument("--jobs", type=int, default=1, help="bursts fitted concurrently")
    p.add_argument("--no-figures", action="store_true", help="skip the matplotlib report")
    p.add_argument("--quiet", action="store_true")


def _window(values):
    return [float(v) for v in values]


def build_parser():
    parser = argparse.ArgumentParser(prog="nirburst", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"nirburst {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("separate", help="two-stream layer separation of a burst")
    p.add_argument("--task", required=True, choices=SEPARATION_TASKS)
    p.add_argument("--occlusion-aware", action="store_true", help="use the flow model with w")
    p.add_argument("--motion", choices=tuple(MOTION_FLAGS))
    _add_fit_flags(p)
    p.set_defaults(func=cmd_separate)

    p = sub.add_parser("fuse", help="fuse a burst into one canonical view (stitching, SR)")
    p.add_argument("--motion", choices=tuple(MOTION_FLAGS))
    p.add_argument("--window", nargs=4, type=float, metavar=("X0", "Y0", "X1", "Y1"))
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--cfa", choices=("RGGB", "BGGR", "GRBG", "GBRG"),
                   help="joint demosaicing from 16-bit raw mosaics")
    _add_fit_flags(p)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("render", help="render a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--window", nargs=4, type=float, metavar=("X0", "Y0", "X1", "Y1"))
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--name", default="render")
    p.add_argument("--canonical-only", action="store_true")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("synth", help="write a synthetic burst with ground truth")
    p.add_argument("--kind", required=True,
                   choices=("translate", "homography", "additive_interf", "fence", "rain",
                            "occlusion", "panorama"))
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    # unset options fall back to the SynthSpec defaults
    p.add_argument("--frames", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--max-shift", type=float)
    p.add_argument("--projective", type=float)
    p.add_argument("--amplitude", type=float)
    p.add_argument("--density", type=float)
    p.add_argument("--streak-length", type=int)
    p.add_argument("--interference", choices=("bands", "smooth"))
    p.add_argument("--band-frequency", type=float)
    p.add_argument("--overlap", type=float, help="panorama crop overlap fraction")
    p.add_argument("--texture-size", type=int, help="panorama source texture side")
    p.add_argument("--texture-scale", type=float, help="pixels per coarsest noise cell")
    p.add_argument("--texture", help="image to use instead of procedural noise")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("metrics", help="PSNR/SSIM/NCC/SI between two PNG directories")
    p.add_argument("--ref", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--output", help="also write the records to this file")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--extensive", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report", help="render loss and layer figures for a run directory")
    p.add_argument("--run", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except DivergedError as exc:
        where = f" (last checkpoint: {exc.checkpoint})" if exc.checkpoint else ""
        print(f"error: {exc}{where}", file=sys.stderr)
        return exc.exit_code
    except NirError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())

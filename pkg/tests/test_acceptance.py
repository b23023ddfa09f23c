"""End-to-end acceptance on synthetic bursts with known ground truth.

Every criterion prints one PASS/FAIL line in the terminal summary. Values
that come from a measured reference run (PSNR floors) live in
``oracle_thresholds.json`` next to this file, together with the seeds and
synthetic-burst settings that produced them.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from nirburst import autodiff as ad
from nirburst.cli import main
from nirburst.config import default_recipe, with_motion
from nirburst.gradcheck import run_suite
from nirburst.imaging import load_tensor, quantize, read_png, save_image, save_tensor
from nirburst.metrics import ncc, psnr, si, ssim
from nirburst.model import SeparationModel
from nirburst.motion import pixel_extent_corners, project_points, relative_homography
from nirburst.synth import SynthSpec, generate
from nirburst.trainer import Trainer
from oracles import windowed_oracle

pytestmark = pytest.mark.acceptance

ORACLE = json.loads((Path(__file__).parent / "oracle_thresholds.json").read_text())
RESULTS = []


def record(number, ok, detail):
    """Log the criterion; a failure listed under ``known_failures`` is reported as xfail."""
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS.append(line)
    print(line)
    reason = ORACLE.get("known_failures", {}).get(str(number))
    if not ok and reason:
        pytest.xfail(f"criterion {number}: {reason}")
    return ok


def synth_args(entry):
    args = []
    for key, val in entry["synth"].items():
        args += [f"--{key.replace('_', '-')}", str(val)]
    return args


class Runs:
    """Lazily executed CLI runs shared between criteria (and re-run for determinism)."""

    def __init__(self, root: Path):
        self.root = root
        self.cache = {}

    def data(self, name):
        entry = ORACLE[name]
        out = self.root / "data" / name
        if not out.exists():
            assert main(["synth", "--out", str(out), *synth_args(entry)]) == 0
        return out

    def fit(self, name, tag="a", extra=()):
        key = (name, tag, tuple(extra))
        if key not in self.cache:
            entry = ORACLE[name]
            data = self.data(name)
            out = self.root / "runs" / f"{name}-{tag}"
            argv = [*entry["command"], "--input", str(data / "frames"), "--output", str(out),
                    "--ground-truth", str(data), "--seed", str(entry["train_seed"]),
                    "--no-figures", "--quiet", *extra]
            t0 = time.perf_counter()
            assert main(argv) == 0
            self.cache[key] = (out, time.perf_counter() - t0)
        return self.cache[key]


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    return Runs(tmp_path_factory.mktemp("acceptance"))


def rendered_frames(run_dir):
    model = SeparationModel.load(run_dir / "model")
    return model, [model.render_frame_index(k) for k in range(model.frame_shape[0])]


def mean_psnr(frames, refs, peak=1.0):
    return float(np.mean([psnr(a, b, peak) for a, b in zip(frames, refs)]))


def test_c01_gradient_suite():
    results, seconds = run_suite(seed=0, total_probes=100)
    worst = max(results, key=lambda r: r.max_rel_err)
    probes = sum(r.probes for r in results)
    ok = all(r.passed for r in results) and probes >= 100 and seconds < 10
    assert record(1, ok, f"{len(results)} checks, {probes} probes, worst {worst.name} "
                         f"{worst.max_rel_err:.2e}, {seconds:.1f} s")


def test_c02_homography_recovery(runs):
    out, wall = runs.fit("homography")
    manifest = json.loads((out / "manifest.json").read_text())
    truth = load_tensor(runs.data("homography") / "ground_truth" / "motion.nirt")
    Ms = [np.array(m) for m in manifest["homographies"]]
    corners = np.c_[pixel_extent_corners(64, 64)]
    err = 0.0
    for k in range(1, len(Ms)):
        d = project_points(relative_homography(Ms[k], Ms[0]), corners) - project_points(truth[k], corners)
        err = max(err, float(np.abs(d * 32.0).max()))
    ok = err <= 0.5 and wall < 180
    assert record(2, ok, f"max corner error {err:.3f} px (limit 0.5), {wall:.0f} s (limit 180)")


def panorama_render(run_dir, texture):
    """Scene network sampled on the union of both crops, in frame 0's pixel grid."""
    model = SeparationModel.load(run_dir / "model")
    _, H, W = model.frame_shape
    h, span = texture.shape[:2]
    ys, xs = np.meshgrid((2 * np.arange(h) + 1) / H - 1, (2 * np.arange(span) + 1) / W - 1,
                         indexing="ij")
    pts = project_points(model.frame_homographies()[0], np.c_[xs.ravel(), ys.ravel()])
    with ad.precision(model.config.precision):
        out = model.scene(pts.astype(ad.get_dtype())).data.astype(np.float64)
    return np.clip(out.reshape(h, span, 3), 0.0, 1.0)


def test_c03_panorama(runs):
    entry = ORACLE["panorama"]
    out, wall = runs.fit("panorama")
    texture = load_tensor(runs.data("panorama") / "ground_truth" / "texture.nirt")
    value = psnr(panorama_render(out, texture), texture)
    ok = value >= entry["threshold"] and wall < 180
    assert record(3, ok, f"stitched PSNR {value:.2f} dB (threshold {entry['threshold']}), "
                         f"{wall:.0f} s (limit 180)")


def moire_scene_psnr(run_dir, scene):
    _, renders = rendered_frames(run_dir)
    return mean_psnr([np.clip(r["scene"], -1, 1) for r in renders], scene, peak=2.0)


def test_c04_additive_separation(runs):
    entry = ORACLE["moire"]
    out, wall = runs.fit("moire")
    gt = runs.data("moire") / "ground_truth"
    scene, frames = load_tensor(gt / "scene.nirt"), load_tensor(gt / "frames.nirt")
    value = moire_scene_psnr(out, scene)
    baseline = mean_psnr(frames, scene, peak=2.0)
    ok = value >= entry["threshold"] and value >= baseline + 6.0 and wall < 300
    assert record(4, ok, f"scene PSNR {value:.2f} dB (threshold {entry['threshold']}), baseline "
                         f"{baseline:.2f} dB, gain {value - baseline:+.2f} dB (need +6), "
                         f"{wall:.0f} s (limit 300)")


def test_c05_rain(runs):
    entry = ORACLE["rain"]
    out, wall = runs.fit("rain")
    gt = runs.data("rain") / "ground_truth"
    scene, mask = load_tensor(gt / "scene.nirt"), load_tensor(gt / "mask.nirt") > 0.5
    _, renders = rendered_frames(out)
    value = mean_psnr([np.clip(r["scene"], 0, 1) for r in renders], scene)
    streak = np.stack([r["interf"][..., 0] for r in renders])
    ratio = float(streak[mask].mean() / streak[~mask].mean())
    ok = value >= entry["threshold"] and ratio >= 5.0 and wall < 300
    assert record(5, ok, f"scene PSNR {value:.2f} dB (threshold {entry['threshold']}), streak mass "
                         f"ratio {ratio:.1f} (need 5), {wall:.0f} s (limit 300)")


def reconstruction_mse(kind, seed, iterations):
    seq, _ = generate(SynthSpec(kind="occlusion", seed=seed))
    cfg = with_motion(default_recipe("fuse"), kind)
    cfg.iterations, cfg.seed = iterations, seed
    model = SeparationModel.create(cfg, seq.frames.shape[:3], seed=seed)
    trainer = Trainer(model, seq)
    for _ in range(iterations):
        trainer.train_step()
    rec = np.stack([model.render_frame_index(k)["composite"] for k in range(seq.T)])
    return float(np.mean((rec - seq.frames) ** 2))


def test_c06_occlusion_ablation():
    entry = ORACLE["occlusion"]
    t0 = time.perf_counter()
    rows = [(s, reconstruction_mse("flow", s, entry["iterations"]),
             reconstruction_mse("flow_w", s, entry["iterations"])) for s in entry["seeds"]]
    wall = time.perf_counter() - t0
    ok = all(w < f for _, f, w in rows) and wall < 600
    detail = ", ".join(f"seed {s}: flow {f:.2e} vs flow_w {w:.2e}" for s, f, w in rows)
    assert record(6, ok, f"{detail}; {wall:.0f} s (limit 600)")


def test_c07_interference_loss_ablation(runs):
    entry = ORACLE["moire"]
    scene = load_tensor(runs.data("moire") / "ground_truth" / "scene.nirt")
    rows = []
    for seed in entry["ablation_seeds"]:
        extra = () if seed == entry["train_seed"] else ("--seed", str(seed))
        full, _ = runs.fit("moire", f"s{seed}" if extra else "a", extra)
        ablated, _ = runs.fit("moire", f"s{seed}-nointerf", (*extra, "--lambda-interf", "0"))
        rows.append((seed, moire_scene_psnr(full, scene), moire_scene_psnr(ablated, scene)))
    ok = all(f - a >= 2.0 for _, f, a in rows)
    detail = ", ".join(f"seed {s}: {f:.2f} vs {a:.2f} dB ({f - a:+.2f})" for s, f, a in rows)
    assert record(7, ok, f"full vs no interference loss, need +2 dB: {detail}")


def test_c08_metric_identities():
    a = np.zeros((32, 32, 3))
    b = np.full((32, 32, 3), 0.1)
    rng = np.random.default_rng(5)
    x = rng.uniform(0, 1, (24, 24, 3))
    vals = {"psnr": psnr(a, b), "ssim": ssim(x, x), "ncc": ncc(x, x), "si": si(x, x)}
    ok = (abs(vals["psnr"] - 20.0) < 1e-9 and vals["ssim"] == 1.0 and vals["ncc"] == 1.0
          and vals["si"] == 1.0)
    g, h = x[:, :, 0], np.clip(x[:, :, 0] + rng.normal(0, 0.05, (24, 24)), 0, 1)
    d_ssim = abs(ssim(g, h) - windowed_oracle(g, h))
    d_si = abs(si(g, h) - windowed_oracle(g, h, structure=True))
    ok = ok and d_ssim < 1e-6 and d_si < 1e-6
    assert record(8, ok, f"psnr {vals['psnr']:.12f}, self ssim/ncc/si {vals['ssim']}/{vals['ncc']}/"
                         f"{vals['si']}, oracle gaps ssim {d_ssim:.1e} si {d_si:.1e}")


def _run_files(run_dir):
    return {str(p.relative_to(run_dir)): p.read_bytes() for p in sorted(run_dir.rglob("*"))
            if p.is_file() and (p.suffix == ".png" and p.parent.name != "figures"
                                or p.name == "manifest.json")}


def test_c09_determinism(runs):
    diffs = []
    for name in ("homography", "panorama", "moire", "rain"):
        first, _ = runs.fit(name)
        second, _ = runs.fit(name, tag="b")
        a, b = _run_files(first), _run_files(second)
        if a.keys() != b.keys() or any(a[k] != b[k] for k in a):
            diffs.append(name)
    ok = not diffs
    assert record(9, ok, "bit-identical images and manifests for homography, panorama, moire, rain"
                  if ok else f"differences in {diffs}")


def test_c10_round_trips(tmp_path):
    rng = np.random.default_rng(9)
    arr = rng.standard_normal((3, 5, 7)).astype(np.float32)
    save_tensor(arr, tmp_path / "a.nirt")
    nirt_ok = np.array_equal(load_tensor(tmp_path / "a.nirt"), arr)

    seq, _ = generate(SynthSpec(kind="translate", T=2, H=12, W=12))
    cfg = default_recipe("fuse")
    cfg.scene_net.hidden_units, cfg.iterations = 32, 3
    model = SeparationModel.create(cfg, seq.frames.shape[:3], seed=2)
    trainer = Trainer(model, seq)
    for _ in range(3):
        trainer.train_step()
    trainer.save_checkpoint(tmp_path / "ck")
    again = Trainer.from_checkpoint(tmp_path / "ck", seq)
    ckpt_ok = all(np.array_equal(p.data, q.data)
                  for p, q in zip(model.parameters(), again.model.parameters()))
    ckpt_ok = ckpt_ok and np.array_equal(trainer.adam.m[0], again.adam.m[0])

    render = model.render_frame_index(0)["scene"]
    save_image(render, tmp_path / "r.png", "unit")
    png_ok = np.array_equal(read_png(tmp_path / "r.png"), quantize(render, "unit"))
    ok = nirt_ok and ckpt_ok and png_ok
    assert record(10, ok, f"NIRT {nirt_ok}, checkpoint {ckpt_ok}, PNG {png_ok}")

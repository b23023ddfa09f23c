"""Synthetic bursts with known motion and known layers.

Frames are produced by warping a procedural texture with a per-frame
homography (bicubic resampling) and combining the result with an
interference layer through :func:`nirburst.formation.compose`, the same code
path the model trains through.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import SpecError
from .formation import compose
from .imaging import BurstSequence, frame_times, pixel_centers, save_image, save_tensor

KINDS = ("translate", "homography", "additive_interf", "fence", "rain", "occlusion", "panorama")


@dataclass
class SynthSpec:
    kind: str = "translate"
    T: int = 5
    H: int = 64
    W: int = 64
    seed: int = 0
    max_shift: float = 4.0  # pixels
    projective: float = 0.0  # magnitude of h7, h8 in normalized units
    amplitude: float = 0.2
    density: float = 0.04
    streak_length: int = 9
    interference: str = "bands"  # additive_interf: "bands" | "smooth"
    interf_shift: float = 6.0  # pixels, motion of the interference layer
    band_frequency: float = 6.5  # cycles per normalized unit (bands)
    texture_scale: float = 8.0  # pixels per coarsest noise cell
    texture_size: int = 128  # panorama only
    overlap: float = 0.5  # panorama only
    texture_path: str | None = None

    def validate(self):
        if self.kind not in KINDS:
            raise SpecError(f"unknown synth kind {self.kind!r}; expected one of {KINDS}")
        if self.T < 1 or self.H < 4 or self.W < 4:
            raise SpecError("need T >= 1 and H, W >= 4")
        if self.max_shift < 0 or self.amplitude < 0 or not 0 <= self.density <= 1:
            raise SpecError("magnitudes must be non-negative and density in [0, 1]")
        if self.interference not in ("bands", "smooth"):
            raise SpecError(f"unknown interference style {self.interference!r}")
        if self.kind == "panorama" and not 0 < self.overlap < 1:
            raise SpecError("panorama overlap must be in (0, 1)")
        return self


@dataclass
class GroundTruth:
    scene: np.ndarray  # T x H x W x 3
    interference: np.ndarray | None = None  # T x H x W x c
    alpha: np.ndarray | None = None  # T x H x W x 1
    motion: np.ndarray | None = None  # T x 3 x 3, frame-t -> frame-0 normalized coords
    mask: np.ndarray | None = None  # T x H x W, streak / occluder support
    texture: np.ndarray | None = None  # panorama source region
    extras: dict = field(default_factory=dict)


# -------------------------------------------------------------- sampling


def _cubic_weights(f):
    # Catmull-Rom (a = -0.5) weights for offsets -1, 0, 1, 2
    f2, f3 = f * f, f * f * f
    return (
        -0.5 * f3 + f2 - 0.5 * f,
        1.5 * f3 - 2.5 * f2 + 1.0,
        -1.5 * f3 + 2.0 * f2 + 0.5 * f,
        0.5 * f3 - 0.5 * f2,
    )


def bicubic_sample(texture, x, y):
    """Catmull-Rom sample of ``texture`` (H x W [x C]) at column ``x``, row ``y``.

    Coordinates are in texel units with texel centers on integers and must
    keep a 2-texel margin from the border.
    """
    tex = np.asarray(texture, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    h, w = tex.shape[:2]
    if (np.any(x < 2) or np.any(y < 2) or np.any(x > w - 3) or np.any(y > h - 3)
            or not (np.all(np.isfinite(x)) and np.all(np.isfinite(y)))):
        raise SpecError("bicubic sample outside the texture's 2-texel margin")
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    wx = _cubic_weights(x - x0)
    wy = _cubic_weights(y - y0)
    extra = (1,) * (tex.ndim - 2)
    out = 0.0
    for a in range(4):
        row = 0.0
        for b in range(4):
            row = row + wx[b].reshape(x.shape + extra) * tex[y0 + a - 1, x0 + b - 1]
        out = out + wy[a].reshape(y.shape + extra) * row
    return out


def value_noise(height, width, rng, scale=8.0, octaves=3, channels=3):
    """Band-limited value noise in [0.1, 0.9]: ``octaves`` bicubic-upsampled
    random grids, each twice as fine and half as strong as the previous."""
    out = np.zeros((height, width, channels))
    amp = 1.0
    ys, xs = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    for k in range(octaves):
        cell = scale / (2 ** k)
        gh = int(math.ceil(height / cell)) + 5
        gw = int(math.ceil(width / cell)) + 5
        grid = rng.uniform(-1, 1, size=(gh, gw, channels))
        out += amp * bicubic_sample(grid, xs / cell + 2, ys / cell + 2)
        amp *= 0.5
    lo, hi = out.min(), out.max()
    return 0.1 + 0.8 * (out - lo) / (hi - lo)


def _load_texture(path, height, width):
    from PIL import Image
    img = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    if img.shape[0] < height or img.shape[1] < width:
        raise SpecError(f"texture {path} is smaller than the required {height}x{width}")
    return img[:height, :width]


# ----------------------------------------------------------------- warps


def _to_texel(X, Y, W, H, margin):
    return (X + 1) * 0.5 * W - 0.5 + margin, (Y + 1) * 0.5 * H - 0.5 + margin


def warp_texture(texture, A, H, W, margin):
    """Frame of size H x W whose normalized point p shows world point A p."""
    gx, gy = np.meshgrid(pixel_centers(W), pixel_centers(H))
    hom = np.stack([gx, gy, np.ones_like(gx)], axis=-1) @ np.asarray(A).T
    X, Y = hom[..., 0] / hom[..., 2], hom[..., 1] / hom[..., 2]
    u, v = _to_texel(X, Y, W, H, margin)
    return bicubic_sample(texture, u, v)


def _translation(dx_px, dy_px, W, H):
    A = np.eye(3)
    A[0, 2] = 2.0 * dx_px / W
    A[1, 2] = 2.0 * dy_px / H
    return A


def _random_motions(spec, rng, projective=0.0):
    mats = [np.eye(3)]
    for _ in range(1, spec.T):
        dx, dy = rng.uniform(-spec.max_shift, spec.max_shift, size=2)
        A = _translation(dx, dy, spec.W, spec.H)
        if projective:
            A[2, 0], A[2, 1] = rng.uniform(-projective, projective, size=2)
        mats.append(A)
    return np.stack(mats)


def _margin(spec, extra=0.0):
    return int(math.ceil(spec.max_shift + extra + 2 * spec.projective * max(spec.H, spec.W))) + 4


def _scene_texture(spec, rng, margin):
    th, tw = spec.H + 2 * margin, spec.W + 2 * margin
    if spec.texture_path:
        return _load_texture(spec.texture_path, th, tw)
    return value_noise(th, tw, rng, scale=spec.texture_scale)


def _scene_frames(spec, rng, motions):
    margin = _margin(spec)
    tex = _scene_texture(spec, rng, margin)
    return np.stack([warp_texture(tex, A, spec.H, spec.W, margin) for A in motions])


# ------------------------------------------------------------ generators


def _interference_bands(spec, rng):
    """Signed sinusoidal colour bands re-drawn for every frame.

    Orientation, frequency (within 15% of ``band_frequency``) and phase change
    from frame to frame, as a screen moire does when the camera moves, so no
    warp of the scene can explain the bands.
    """
    gx, gy = np.meshgrid(pixel_centers(spec.W), pixel_centers(spec.H))
    phases = rng.uniform(0, 2 * np.pi, size=3)
    frames = []
    for _ in range(spec.T):
        theta = rng.uniform(0, np.pi)
        freq = spec.band_frequency * rng.uniform(0.85, 1.15)
        shift = rng.uniform(0, 2 * np.pi)
        u = gx * np.cos(theta) + gy * np.sin(theta)
        frames.append(np.stack([spec.amplitude * np.sin(2 * np.pi * freq * u + p + shift)
                                for p in phases], axis=-1))
    return np.stack(frames)


def _interference_smooth(spec, rng):
    """Low-frequency non-negative layer translating independently (reflection proxy)."""
    margin = int(math.ceil(spec.interf_shift)) + 4
    tex = value_noise(spec.H + 2 * margin, spec.W + 2 * margin, rng, scale=spec.texture_scale * 2,
                      octaves=2)
    frames = []
    for _ in range(spec.T):
        dx, dy = rng.uniform(-spec.interf_shift, spec.interf_shift, size=2)
        frames.append(spec.amplitude * warp_texture(tex, _translation(dx, dy, spec.W, spec.H),
                                                    spec.H, spec.W, margin))
    return np.stack(frames)


def _compose_frames(kind, scene, interf=None, alpha=None):
    T, H, W, _ = scene.shape
    with ad.precision("float64"):
        flat = lambda a: None if a is None else a.reshape(T * H * W, -1)  # noqa: E731
        out = compose(kind, flat(scene), flat(interf), flat(alpha)).data
    return out.reshape(T, H, W, 3)


def _rain_masks(spec, rng):
    """Per-frame streak masks drawn independently; streak pixels carry alpha."""
    H, W, L = spec.H, spec.W, spec.streak_length
    n = int(round(spec.density * H * W / L))
    base_angle = rng.uniform(-0.35, 0.35)
    masks = np.zeros((spec.T, H, W))
    for t in range(spec.T):
        for _ in range(n):
            r0, c0 = rng.uniform(0, H), rng.uniform(0, W)
            ang = base_angle + rng.normal(0, 0.05)
            steps = np.arange(L)
            rr = np.floor(r0 + steps * np.cos(ang)).astype(int)
            cc = np.floor(c0 + steps * np.sin(ang)).astype(int)
            keep = (rr >= 0) & (rr < H) & (cc >= 0) & (cc < W)
            masks[t, rr[keep], cc[keep]] = 1.0
    return masks


def _fence(spec, rng):
    """Periodic grid of bars (alpha near 1) with its own translation."""
    period = max(8, spec.W // 6)
    width = max(2, period // 4)
    color = rng.uniform(0.05, 0.25, size=3)
    alpha = np.zeros((spec.T, spec.H, spec.W, 1))
    interf = np.broadcast_to(color, (spec.T, spec.H, spec.W, 3)).copy()
    rows, cols = np.meshgrid(np.arange(spec.H), np.arange(spec.W), indexing="ij")
    for t in range(spec.T):
        ox, oy = rng.uniform(0, spec.interf_shift * 2, size=2)
        bars = (((cols + ox) % period) < width) | (((rows + oy) % period) < width)
        alpha[t, :, :, 0] = np.where(bars, 0.95, 0.0)
    return interf, alpha


def _occlusion(spec, rng, motions):
    """Textured square sliding over the background, occluding and revealing it."""
    bg = _scene_frames(spec, rng, motions)
    side = spec.H // 3
    fg_tex = value_noise(side + 8, side + 8, rng, scale=4.0)
    fg = fg_tex[4:4 + side, 4:4 + side]
    frames = bg.copy()
    mask = np.zeros((spec.T, spec.H, spec.W), dtype=bool)
    travel = spec.W - side - 8
    for t in range(spec.T):
        c0 = 4 + int(round(travel * t / max(spec.T - 1, 1)))
        r0 = spec.H // 2 - side // 2
        frames[t, r0:r0 + side, c0:c0 + side] = fg
        mask[t, r0:r0 + side, c0:c0 + side] = True
    return frames, bg, mask


def _panorama(spec, rng):
    n = spec.texture_size
    tex = (_load_texture(spec.texture_path, n, n) if spec.texture_path
           else value_noise(n, n, rng, scale=spec.texture_scale))
    step = int(round(spec.W * (1 - spec.overlap)))
    span = spec.W + step * (spec.T - 1)
    if spec.H > n or span > n:
        raise SpecError(f"crops ({spec.H} x {span} union) do not fit in the {n} x {n} texture")
    r0 = (n - spec.H) // 2
    c0 = (n - span) // 2
    frames = np.stack([tex[r0:r0 + spec.H, c0 + k * step:c0 + k * step + spec.W]
                       for k in range(spec.T)])
    motions = np.stack([_translation(k * step, 0, spec.W, spec.H) for k in range(spec.T)])
    return frames, motions, tex[r0:r0 + spec.H, c0:c0 + span]


def generate(spec: SynthSpec):
    """Return ``(BurstSequence, GroundTruth)`` for ``spec``."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    kind = spec.kind
    if kind == "panorama":
        frames, motions, region = _panorama(spec, rng)
        return BurstSequence(frames, "unit"), GroundTruth(frames, motion=motions, texture=region)
    if kind == "occlusion":
        motions = np.stack([np.eye(3)] * spec.T)
        frames, bg, mask = _occlusion(spec, rng, motions)
        return BurstSequence(frames, "unit"), GroundTruth(bg, motion=motions, mask=mask)

    projective = spec.projective if kind == "homography" else 0.0
    motions = _random_motions(spec, rng, projective)
    scene = _scene_frames(spec, rng, motions)
    if kind in ("translate", "homography"):
        return BurstSequence(scene, "unit"), GroundTruth(scene, motion=motions)
    if kind == "additive_interf":
        if spec.interference == "bands":
            # shrink the texture when the bands would push the sum out of range
            scene_s = 2.0 * scene - 1.0
            scene_s = scene_s * min(1.0, (0.999 - spec.amplitude) / np.abs(scene_s).max())
            interf = _interference_bands(spec, rng)
            frames = _compose_frames("additive", scene_s, interf)
            if np.abs(frames).max() > 1:
                raise SpecError("amplitude too large: composite leaves [-1, 1]")
            return (BurstSequence(frames, "signed"),
                    GroundTruth(scene_s, interference=interf, motion=motions))
        interf = _interference_smooth(spec, rng)
        scene_u = scene * (1.0 - spec.amplitude)
        frames = _compose_frames("additive", scene_u, interf)
        return BurstSequence(np.clip(frames, 0, 1), "unit"), GroundTruth(scene_u, interference=interf,
                                                                          motion=motions)
    if kind == "fence":
        interf, alpha = _fence(spec, rng)
        frames = _compose_frames("fence_alpha", scene, interf, alpha)
        return BurstSequence(frames, "unit"), GroundTruth(scene, interference=interf, alpha=alpha,
                                                          motion=motions, mask=alpha[..., 0] > 0)
    masks = _rain_masks(spec, rng)
    strength = spec.amplitude if spec.amplitude > 0 else 0.0
    interf = (masks * strength)[..., None]
    frames = _compose_frames("rain_achromatic", scene, interf)
    return BurstSequence(frames, "unit"), GroundTruth(scene, interference=interf, motion=motions,
                                                      mask=masks > 0)


def write_burst(seq: BurstSequence, gt: GroundTruth, out_dir, spec: SynthSpec | None = None):
    """Write frames as PNGs plus lossless NIRT ground truth under ``out_dir``."""
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    for k in range(seq.T):
        save_image(seq.frames[k], out / "frames" / f"frame_{k:03d}.png", seq.normalization)
    gt_dir = out / "ground_truth"
    gt_dir.mkdir(exist_ok=True)
    save_tensor(seq.frames, gt_dir / "frames.nirt")
    for name in ("scene", "interference", "alpha", "motion", "mask", "texture"):
        value = getattr(gt, name)
        if value is not None:
            save_tensor(np.asarray(value, dtype=np.float64), gt_dir / f"{name}.nirt")
    for k in range(seq.T):
        save_image(gt.scene[k], gt_dir / "scene" / f"frame_{k:03d}.png", seq.normalization)
    meta = {"normalization": seq.normalization, "T": seq.T, "H": seq.H, "W": seq.W}
    if spec is not None:
        meta["spec"] = asdict(spec)
    (out / "synth.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return out


def rain_mask_overlap_stats(masks):
    """Pairwise overlap counts and their independence-model expectation/sigma."""
    masks = np.asarray(masks, dtype=bool)
    T = masks.shape[0]
    n = masks[0].size
    rows = []
    for a in range(T):
        for b in range(a + 1, T):
            pa, pb = masks[a].mean(), masks[b].mean()
            p = pa * pb
            rows.append((int((masks[a] & masks[b]).sum()), n * p, math.sqrt(n * p * (1 - p))))
    return rows


__all__ = ["SynthSpec", "GroundTruth", "generate", "bicubic_sample", "value_noise",
           "write_burst", "rain_mask_overlap_stats", "frame_times", "KINDS"]

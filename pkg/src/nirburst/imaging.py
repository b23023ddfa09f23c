"""Burst ingestion, pixel-coordinate conventions, and image/tensor files."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ConfigError, IngestError, UsageError
from .formation import CFA_PATTERNS, cfa_mask

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp")
NIRT_MAGIC = b"NIRT"
NIRT_VERSION = 1
LAYER_SUFFIXES = {"scene": "_scene", "interf": "_interf", "alpha": "_alpha", "canonical": "_canon"}


@dataclass
class BurstSequence:
    frames: np.ndarray  # T x H x W x C, normalized
    normalization: str = "unit"
    filenames: list = field(default_factory=list)
    bit_depth: int = 8
    cfa: str | None = None

    def __post_init__(self):
        f = np.asarray(self.frames, dtype=np.float64)
        if f.ndim != 4 or f.shape[0] < 1 or 0 in f.shape:
            raise UsageError(f"frames must be a non-empty T x H x W x C array, got {f.shape}")
        lo, hi = value_range(self.normalization)
        if f.min() < lo - 1e-9 or f.max() > hi + 1e-9:
            raise UsageError(f"frame values outside the {self.normalization} range [{lo}, {hi}]")
        self.frames = f

    @property
    def shape(self):
        return self.frames.shape

    @property
    def T(self):
        return self.frames.shape[0]

    @property
    def H(self):
        return self.frames.shape[1]

    @property
    def W(self):
        return self.frames.shape[2]

    @property
    def C(self):
        return self.frames.shape[3]


# ------------------------------------------------------------ conventions


def value_range(normalization):
    if normalization == "unit":
        return 0.0, 1.0
    if normalization == "signed":
        return -1.0, 1.0
    raise ConfigError(f"unknown normalization {normalization!r}")


def normalize(values, normalization):
    v = np.asarray(values, dtype=np.float64)
    if normalization == "unit":
        return v / 255.0
    if normalization == "signed":
        return v / 127.5 - 1.0
    raise ConfigError(f"unknown normalization {normalization!r}")


def denormalize(values, normalization):
    v = np.asarray(values, dtype=np.float64)
    if normalization == "unit":
        return v * 255.0
    if normalization == "signed":
        return (v + 1.0) * 127.5
    raise ConfigError(f"unknown normalization {normalization!r}")


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize(values, normalization) -> np.ndarray:
    """Clamp to the displayable range and round half away from zero to uint8."""
    v = round_half_away(denormalize(values, normalization))
    return np.clip(v, 0, 255).astype(np.uint8)


def pixel_centers(n):
    """Normalized centers of ``n`` pixels spanning [-1, 1]."""
    return (2.0 * np.arange(n) + 1.0) / n - 1.0


def frame_times(T):
    return np.zeros(1) if T == 1 else np.linspace(-1.0, 1.0, T)


def grid_coords(height, width, t=None, window=(-1.0, -1.0, 1.0, 1.0)):
    """Pixel-center coordinates of a ``height x width`` grid over ``window``.

    Returns ``(H*W) x 2`` (or ``x 3`` with a constant ``t`` column), rows in
    row-major pixel order.
    """
    x0, y0, x1, y1 = window
    if not (x1 > x0 and y1 > y0):
        raise UsageError(f"empty window {window}")
    if height < 1 or width < 1:
        raise UsageError("resolution must be at least 1 x 1")
    xs = x0 + (pixel_centers(width) + 1.0) * 0.5 * (x1 - x0)
    ys = y0 + (pixel_centers(height) + 1.0) * 0.5 * (y1 - y0)
    gx, gy = np.meshgrid(xs, ys)
    cols = [gx.ravel(), gy.ravel()]
    if t is not None:
        cols.append(np.full(gx.size, float(t)))
    return np.stack(cols, axis=1)


# ----------------------------------------------------------------- ingest


def _list_images(directory: Path):
    return sorted(p for p in directory.iterdir()
                  if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def _open(path):
    try:
        img = Image.open(path)
        img.load()
        return img
    except (UnidentifiedImageError, OSError) as exc:
        raise IngestError(f"cannot decode image {path.name}: {exc}") from exc


def load_burst(directory, normalization="unit", cfa=None, black_level=0.0,
               white_level=65535.0) -> BurstSequence:
    """Read every image in ``directory`` (sorted by name) as one burst.

    RGB mode expects 8-bit images.  CFA mode expects single-channel 16-bit
    mosaics; each pixel's value is placed in the channel the pattern samples
    there and the other two channels are zero.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise IngestError(f"input directory {directory} does not exist")
    if cfa is not None and cfa not in CFA_PATTERNS:
        raise ConfigError(f"unknown CFA pattern {cfa!r}")
    files = _list_images(directory)
    if len(files) < 2:
        raise IngestError(f"{directory}: a burst needs at least 2 frames, found {len(files)}")
    frames = []
    depth = 8
    for path in files:
        img = _open(path)
        if cfa is None:
            if img.mode not in ("RGB", "RGBA", "L", "P"):
                raise IngestError(f"{path.name}: unsupported image mode {img.mode} (8-bit expected)")
            arr = np.asarray(img.convert("RGB"), dtype=np.float64)
            frames.append(normalize(arr, normalization))
        else:
            if img.mode not in ("I;16", "I;16B", "I;16L", "I"):
                raise ConfigError(f"{path.name}: CFA mode needs 16-bit single-channel raw frames, "
                                  f"got mode {img.mode}")
            depth = 16
            raw = np.asarray(img, dtype=np.float64)
            mono = np.clip((raw - black_level) / (white_level - black_level), 0.0, 1.0)
            h, w = mono.shape
            rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
            mask = cfa_mask(cfa, rr.ravel(), cc.ravel()).reshape(h, w, 3)
            frames.append(mono[:, :, None] * mask)
        if frames[-1].shape != frames[0].shape:
            raise IngestError(f"{path.name}: dimensions {frames[-1].shape[:2]} differ from "
                              f"{files[0].name} {frames[0].shape[:2]}")
    norm = "unit" if cfa is not None else normalization
    return BurstSequence(np.stack(frames), norm, [p.name for p in files], depth, cfa)


def find_bursts(directory):
    """Burst directories under ``directory``: itself if it holds images,
    otherwise each immediate subdirectory that does."""
    directory = Path(directory)
    if not directory.is_dir():
        raise IngestError(f"input directory {directory} does not exist")
    if _list_images(directory):
        return [directory]
    subs = [d for d in sorted(directory.iterdir()) if d.is_dir() and _list_images(d)]
    if not subs:
        raise IngestError(f"{directory}: no images found")
    return subs


# ------------------------------------------------------------------ output


def to_uint8(image, normalization) -> np.ndarray:
    img = np.asarray(image)
    if img.dtype == np.uint8:
        return img
    if not np.all(np.isfinite(img)):
        raise UsageError("image contains non-finite values")
    return quantize(img, normalization)


def save_image(image, path, normalization="unit") -> Path:
    """Write an ``H x W x 3`` or ``H x W`` (or ``H x W x 1``) image as 8-bit PNG."""
    path = Path(path)
    img = to_uint8(image, normalization)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(img).save(path, format="PNG")
    except OSError as exc:
        raise IngestError(f"cannot write {path}: {exc}") from exc
    return path


def read_png(path) -> np.ndarray:
    path = Path(path)
    return np.asarray(_open(path))


def save_tensor(array, path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(tensor_to_bytes(array))
    except OSError as exc:
        raise IngestError(f"cannot write {path}: {exc}") from exc
    return path


def tensor_to_bytes(array) -> bytes:
    a = np.asarray(array)
    if not np.all(np.isfinite(a)):
        raise UsageError("tensor contains non-finite values")
    header = NIRT_MAGIC + struct.pack(f"<II{a.ndim}I", NIRT_VERSION, a.ndim, *a.shape)
    return header + np.ascontiguousarray(a, dtype="<f4").tobytes()


def load_tensor(path) -> np.ndarray:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise IngestError(f"cannot read {path}: {exc}") from exc
    if buf[:4] != NIRT_MAGIC:
        raise IngestError(f"{path}: not a NIRT file")
    version, ndim = struct.unpack_from("<II", buf, 4)
    if version != NIRT_VERSION:
        raise IngestError(f"{path}: unsupported NIRT version {version}")
    dims = struct.unpack_from(f"<{ndim}I", buf, 12)
    off = 12 + 4 * ndim
    count = int(np.prod(dims)) if ndim else 1
    if len(buf) != off + 4 * count:
        raise IngestError(f"{path}: payload size does not match header")
    return np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(dims).copy()

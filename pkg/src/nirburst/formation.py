"""How the scene and interference streams combine into a predicted pixel."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, UsageError

FORMATION_KINDS = ("additive", "fence_alpha", "rain_achromatic", "scene_only", "bayer_masked")
CFA_PATTERNS = ("RGGB", "BGGR", "GRBG", "GBRG")
_CHANNEL = {"R": 0, "G": 1, "B": 2}


def interference_channels(kind: str) -> int:
    """Output width of the interference network for ``kind`` (0 = no network)."""
    return {"additive": 3, "fence_alpha": 4, "rain_achromatic": 1,
            "scene_only": 0, "bayer_masked": 0}[check_kind(kind)]


def check_kind(kind: str) -> str:
    if kind not in FORMATION_KINDS:
        raise UsageError(f"unknown formation kind {kind!r}")
    return kind


def _rows(t, name, width=None):
    if t is None:
        raise UsageError(f"{name} is required for this formation kind")
    if t.ndim != 2 or (width is not None and t.shape[1] != width):
        raise UsageError(f"{name} must be B x {width}, got {t.shape}")
    return t


def compose(kind: str, scene, interf=None, alpha=None) -> Tensor:
    """Predicted frame values ``B x 3`` from the two streams.

    ``additive``         scene + interf
    ``fence_alpha``      (1 - alpha) * scene + alpha * interf
    ``rain_achromatic``  (1 - interf) * scene + interf   (interf is B x 1)
    ``scene_only`` / ``bayer_masked``  scene
    """
    check_kind(kind)
    scene = _rows(scene if isinstance(scene, Tensor) or scene is None else ad.tensor(scene),
                  "scene", 3)
    if interf is not None and not isinstance(interf, Tensor):
        interf = ad.tensor(interf)
    if alpha is not None and not isinstance(alpha, Tensor):
        alpha = ad.tensor(alpha)
    b = scene.shape[0]
    if kind in ("scene_only", "bayer_masked"):
        if interf is not None:
            raise UsageError(f"{kind} takes no interference stream")
        return scene
    if kind == "additive":
        _rows(interf, "interference", 3)
        if interf.shape[0] != b:
            raise UsageError("stream batch sizes differ")
        return scene + interf
    if kind == "fence_alpha":
        _rows(interf, "interference", 3)
        _rows(alpha, "alpha", 1)
        if interf.shape[0] != b or alpha.shape[0] != b:
            raise UsageError("stream batch sizes differ")
        return (1.0 - alpha) * scene + alpha * interf
    _rows(interf, "interference", 1)
    if interf.shape[0] != b:
        raise UsageError("stream batch sizes differ")
    if alpha is not None:
        raise UsageError("rain_achromatic takes no alpha")
    return (1.0 - interf) * scene + interf


def split_interference(kind: str, raw: Tensor):
    """Split the interference network output into ``(U, alpha)``."""
    if kind == "fence_alpha":
        return raw[:, 1:4], raw[:, 0:1]
    return raw, None


def cfa_mask(pattern: str, rows, cols) -> np.ndarray:
    """``B x 3`` 0/1 mask keeping the one channel sampled at each pixel."""
    if pattern not in CFA_PATTERNS:
        raise ConfigError(f"unknown CFA pattern {pattern!r}; expected one of {CFA_PATTERNS}")
    rows = np.asarray(rows, dtype=np.int64).reshape(-1)
    cols = np.asarray(cols, dtype=np.int64).reshape(-1)
    lut = np.array([_CHANNEL[c] for c in pattern]).reshape(2, 2)
    chan = lut[rows % 2, cols % 2]
    mask = np.zeros((len(rows), 3), dtype=ad.get_dtype())
    mask[np.arange(len(rows)), chan] = 1
    return mask


def bayer_mask(pred, pattern: str, rows, cols) -> Tensor:
    return ad.mul(pred, cfa_mask(pattern, rows, cols))

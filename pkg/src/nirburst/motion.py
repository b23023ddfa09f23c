"""Coordinate transforms from frame space into the canonical view.

Three motion models are supported:

``homography``
    ``g(t)`` predicts eight entries of a 3x3 matrix (the bottom-right entry is
    fixed to 1) that maps ``(x, y, 1)`` of frame ``t`` into the canonical plane.
``flow``
    ``g(x, y, t)`` predicts a displacement ``(dx, dy)``; canonical coordinates
    are ``(x + dx, y + dy)``.
``flow_w``
    as ``flow`` plus a third canonical coordinate ``w`` that lets the canonical
    view hold several appearance variants of occluded regions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import SingularTransformError, UsageError
from .networks import Mlp

MOTION_KINDS = ("homography", "flow", "flow_w")
EPS_DIV = 1e-6
IDENTITY_H = (1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class HomographyParams:
    h: tuple

    @property
    def matrix(self) -> np.ndarray:
        return params_to_matrix(self.h)


@dataclass(frozen=True)
class FlowDisplacement:
    dx: np.ndarray
    dy: np.ndarray
    w: np.ndarray | None = None


def motion_out_dim(kind: str) -> int:
    return {"homography": 8, "flow": 2, "flow_w": 3}[check_kind(kind)]


def canonical_dim(kind: str) -> int:
    return 3 if check_kind(kind) == "flow_w" else 2


def check_kind(kind: str) -> str:
    if kind not in MOTION_KINDS:
        raise UsageError(f"unknown motion model {kind!r}; expected one of {MOTION_KINDS}")
    return kind


def params_to_matrix(h) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64).reshape(-1)
    if h.size != 8:
        raise UsageError("a homography needs 8 parameters")
    return np.append(h, 1.0).reshape(3, 3)


def matrix_to_params(m) -> tuple:
    m = np.asarray(m, dtype=np.float64)
    m = m / m[2, 2]
    return tuple(m.reshape(-1)[:8])


def homography_at(g: Mlp, t: float) -> HomographyParams:
    if g.config.in_dim != 1 or g.config.out_dim != 8:
        raise UsageError("homography network must map 1 -> 8")
    out = g(np.array([[t]], dtype=ad.get_dtype()))
    return HomographyParams(tuple(float(v) for v in out.data[0]))


def homography_params(g: Mlp, t) -> Tensor:
    """Per-sample homography parameters, evaluating ``g`` once per distinct t."""
    t = np.asarray(t).reshape(-1)
    uniq, inverse = np.unique(t, return_inverse=True)
    params = g(uniq.reshape(-1, 1).astype(ad.get_dtype()))
    if len(uniq) == len(t) and np.array_equal(uniq, t):
        return params
    return ad.take_rows(params, inverse)


def apply_homography(h, x, y, projective=True):
    """Map ``(x, y)`` through a homography.

    ``h`` is either a :class:`HomographyParams` / 8-sequence shared by all
    points, or a ``B x 8`` tensor of per-point parameters.  ``x`` and ``y`` may
    be tensors, arrays or scalars.  With ``projective=False`` the third
    homogeneous coordinate is dropped instead of divided out.
    """
    if isinstance(h, HomographyParams):
        h = h.h
    if not isinstance(h, Tensor):
        hv = [float(v) for v in np.asarray(h, dtype=np.float64).reshape(-1)]
        xa = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
        ya = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64)
        if not isinstance(x, Tensor) and not isinstance(y, Tensor):
            xn = hv[0] * xa + hv[1] * ya + hv[2]
            yn = hv[3] * xa + hv[4] * ya + hv[5]
            if not projective:
                return xn, yn
            d = hv[6] * xa + hv[7] * ya + 1.0
            _check_denominator(d)
            return xn / d, yn / d
        h = ad.tensor(np.asarray(hv).reshape(1, 8))
    cols = [h[:, i] for i in range(8)]
    x = x if isinstance(x, Tensor) else ad.tensor(np.asarray(x).reshape(-1, 1))
    y = y if isinstance(y, Tensor) else ad.tensor(np.asarray(y).reshape(-1, 1))
    xn = cols[0] * x + cols[1] * y + cols[2]
    yn = cols[3] * x + cols[4] * y + cols[5]
    if not projective:
        return xn, yn
    d = cols[6] * x + cols[7] * y + 1.0
    _check_denominator(d.data)
    return xn / d, yn / d


def _check_denominator(d):
    bad = np.abs(d) <= EPS_DIV
    if np.any(bad):
        idx = int(np.flatnonzero(bad.reshape(-1))[0])
        raise SingularTransformError(
            f"near-singular homography: |denominator| <= {EPS_DIV} at point {idx}", index=idx)


def flow_at(g: Mlp, x, y, t) -> FlowDisplacement:
    if g.config.in_dim != 3 or g.config.out_dim not in (2, 3):
        raise UsageError("flow network must map 3 -> 2 or 3")
    x, y, t = np.broadcast_arrays(*(np.asarray(v, dtype=np.float64) for v in (x, y, t)))
    pts = np.stack([x.ravel(), y.ravel(), t.ravel()], axis=1).astype(ad.get_dtype())
    out = g(pts).data
    shape = x.shape
    w = out[:, 2].reshape(shape) if out.shape[1] == 3 else None
    return FlowDisplacement(out[:, 0].reshape(shape), out[:, 1].reshape(shape), w)


def canonical_coords(kind: str, g: Mlp, coords, projective=True, motion_out=None) -> Tensor:
    """Canonical-view coordinates for a ``B x 3`` batch of ``(x, y, t)``.

    ``motion_out`` may carry a precomputed network output (``B x 8`` for
    homographies, ``B x 2|3`` for flows) so callers can reuse it.
    """
    check_kind(kind)
    c = coords if isinstance(coords, Tensor) else ad.tensor(coords)
    if c.ndim != 2 or c.shape[1] != 3:
        raise UsageError(f"coords must be B x 3, got {c.shape}")
    x, y = c[:, 0], c[:, 1]
    if kind == "homography":
        h = motion_out if motion_out is not None else homography_params(g, c.data[:, 2])
        xn, yn = apply_homography(h, x, y, projective=projective)
        return ad.concat([xn, yn], axis=1)
    out = motion_out if motion_out is not None else g(c)
    xn = x + out[:, 0]
    yn = y + out[:, 1]
    if kind == "flow":
        return ad.concat([xn, yn], axis=1)
    return ad.concat([xn, yn, out[:, 2]], axis=1)


def relative_homography(m_t, m_0) -> np.ndarray:
    """Matrix taking frame-t coordinates to frame-0 coordinates.

    Both inputs map frame coordinates into the canonical plane, so the
    composition ``inv(M_0) @ M_t`` is independent of the canonical gauge.
    """
    r = np.linalg.solve(np.asarray(m_0, dtype=np.float64), np.asarray(m_t, dtype=np.float64))
    return r / r[2, 2]


def pixel_extent_corners(height, width):
    """Corners of the normalized frame footprint (pixel edges, not centers)."""
    return np.array([-1.0, 1.0, 1.0, -1.0]), np.array([-1.0, -1.0, 1.0, 1.0])


def project_points(m, pts) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64)
    hom = np.c_[pts, np.ones(len(pts))] @ np.asarray(m, dtype=np.float64).T
    return hom[:, :2] / hom[:, 2:3]

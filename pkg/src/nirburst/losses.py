"""Training objectives.

All losses are per-sample means over the batch, so the weights do not depend
on how many coordinates are drawn per step.  Jacobians of network outputs with
respect to the input coordinates are forward finite differences, which keeps
the tape first-order while still being differentiable in the parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, UsageError

EXCL_EPS = 1e-6

# terms (besides reconstruction) that each task's objective adds
TASK_TERMS = {
    "moire": ("interf", "excl"),
    "reflection": ("tvflow", "interf", "excl"),
    "fence": ("tvflow", "interf"),
    "rain": ("tvflow", "interf"),
    "denoise": ("tvflow", "interf", "excl"),
    "fuse": ("tvflow",),
    "sr_demosaic": ("tvflow",),
}
OPTIONAL_TERMS = ("w",)


@dataclass
class LossWeights:
    interf: float = 0.0
    tvflow: float = 0.0
    excl: float = 0.0
    w: float = 0.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not (math.isfinite(value) and value >= 0):
                raise ConfigError(f"loss weight {name} must be finite and >= 0, got {value}")

    def get(self, term):
        return getattr(self, term)


@dataclass
class LossReport:
    total: float
    terms: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)

    def as_record(self):
        rec = {"total": self.total}
        rec.update(self.terms)
        return rec


def fd_steps(height, width, frames):
    """Finite-difference steps ``(h_x, h_y, h_t)`` in normalized units."""
    h = 2.0 / max(height, width)
    return h, h, 2.0 / max(frames - 1, 1)


def recon_loss(pred, target) -> Tensor:
    pred = pred if isinstance(pred, Tensor) else ad.tensor(pred)
    target = target if isinstance(target, Tensor) else ad.tensor(target)
    if pred.shape != target.shape:
        raise UsageError(f"prediction {pred.shape} and target {target.shape} differ")
    return ad.l2sq(pred - target) * (1.0 / pred.shape[0])


def fd_jacobian(base: Tensor, shifted, steps) -> Tensor:
    """Stack ``(shifted_c - base) / h_c`` column blocks into ``B x (out * k)``."""
    blocks = [(s - base) * (1.0 / h) for s, h in zip(shifted, steps)]
    return blocks[0] if len(blocks) == 1 else ad.concat(blocks, axis=1)


def shifted_coords(coords, steps, dims=(0, 1, 2)):
    coords = np.asarray(coords)
    out = []
    for d in dims:
        c = coords.copy()
        c[:, d] += steps[d]
        out.append(c)
    return out


def tv_from_jacobian(jac: Tensor) -> Tensor:
    return ad.l1(jac) * (1.0 / jac.shape[0])


def tv_flow_loss(g, coords, steps) -> Tensor:
    """Mean over the batch of the L1 norm of the finite-difference Jacobian of ``g``."""
    coords = np.asarray(coords.data if isinstance(coords, Tensor) else coords,
                        dtype=ad.get_dtype())
    if g.config.out_dim not in (2, 3) or g.config.in_dim != 3:
        raise UsageError("tv_flow_loss needs a flow network (3 -> 2|3)")
    base = g(coords)
    shifted = [g(c) for c in shifted_coords(coords, steps)]
    return tv_from_jacobian(fd_jacobian(base, shifted, steps))


def interference_loss(u) -> Tensor:
    u = u if isinstance(u, Tensor) else ad.tensor(u)
    return ad.l1(u) * (1.0 / u.shape[0])


def exclusion_normalizers(grads1, grads2):
    """``(N1, N2)`` as scalar tensors; ``N1 = sqrt(mean|g2| / mean|g1|)``, ``N2 = 1/N1``."""
    m1 = ad.clamp(ad.mean(ad.abs(grads1)), EXCL_EPS, None)
    m2 = ad.clamp(ad.mean(ad.abs(grads2)), EXCL_EPS, None)
    n1 = ad.sqrt(m2 / m1)
    return n1, 1.0 / n1


def exclusion_loss(grads1, grads2) -> Tensor:
    """Penalty on co-located gradient structure of two streams.

    Each stream is rescaled by the square root of the ratio of mean gradient
    magnitudes before the ``tanh`` squashing, which makes the loss symmetric
    in the two streams.
    """
    g1 = grads1 if isinstance(grads1, Tensor) else ad.tensor(grads1)
    g2 = grads2 if isinstance(grads2, Tensor) else ad.tensor(grads2)
    if g1.shape != g2.shape:
        raise UsageError(f"gradient blocks differ in shape: {g1.shape} vs {g2.shape}")
    n1, n2 = exclusion_normalizers(g1, g2)
    phi = ad.tanh(g1 * n1) * ad.tanh(g2 * n2)
    return ad.mean(ad.square(phi))


def w_l1_loss(w) -> Tensor:
    w = w if isinstance(w, Tensor) else ad.tensor(w)
    return ad.l1(w) * (1.0 / w.size)


def total_loss(task: str, terms: dict, weights: LossWeights):
    """Weighted objective for ``task``; returns ``(loss tensor, LossReport)``.

    ``terms`` maps term names (``recon``, ``interf``, ``tvflow``, ``excl``,
    ``w``) to scalar tensors.  Terms outside the task's objective are ignored.
    """
    if not isinstance(weights, LossWeights):
        raise ConfigError("weights must be a LossWeights")
    weights.__post_init__()
    if task not in TASK_TERMS:
        raise ConfigError(f"unknown task {task!r}")
    if "recon" not in terms:
        raise UsageError("the reconstruction term is required")
    total = terms["recon"]
    values = {"recon": float(terms["recon"].data)}
    used = {}
    for name in TASK_TERMS[task] + OPTIONAL_TERMS:
        if name not in terms:
            continue
        lam = weights.get(name)
        values[name] = float(terms[name].data)
        used[name] = lam
        if lam != 0.0:
            total = total + terms[name] * lam
    report = LossReport(total=float(total.data), terms=values, weights=used)
    return total, report

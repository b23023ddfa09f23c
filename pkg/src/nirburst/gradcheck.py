"""Finite-difference verification of every differentiable building block.

Each check compares the reverse-mode directional derivative ``grad . v``
against the central difference ``(L(p + h v) - L(p - h v)) / 2h`` along random
unit directions ``v`` in float64.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import formation, losses, motion
from .config import TASKS, default_recipe
from .networks import MlpConfig, mlp_init

DEFAULT_H = 1e-4
DEFAULT_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    probes: int
    max_rel_err: float
    tol: float

    @property
    def passed(self):
        return self.max_rel_err < self.tol


def _rel_err(a, b):
    denom = max(abs(a), abs(b))
    return 0.0 if denom == 0 else abs(a - b) / denom


def directional_errors(loss_fn, params, probes, rng, h=DEFAULT_H):
    """Relative errors of ``probes`` random directional derivatives.

    ``loss_fn()`` must build its graph from the current ``p.data`` of every
    tensor in ``params`` and return a scalar tensor.
    """
    with ad.Tape() as tape:
        loss = loss_fn()
    for p in params:
        p.grad = None
    ad.backward(loss, tape)
    grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    base = [p.data.copy() for p in params]
    errors = []
    for _ in range(probes):
        dirs = [rng.standard_normal(p.shape) for p in params]
        norm = np.sqrt(sum(float((d * d).sum()) for d in dirs))
        dirs = [d / norm for d in dirs]
        analytic = sum(float((g * d).sum()) for g, d in zip(grads, dirs))
        vals = []
        for sign in (1.0, -1.0):
            for p, b0, d in zip(params, base, dirs):
                p.data = b0 + sign * h * d
            vals.append(float(loss_fn().data))
        for p, b0 in zip(params, base):
            p.data = b0.copy()
        numeric = (vals[0] - vals[1]) / (2 * h)
        errors.append(_rel_err(analytic, numeric))
    return errors


def _away_from_zero(rng, shape, lo=0.05, hi=1.0):
    return rng.uniform(lo, hi, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _op_cases(rng):
    """``(name, params, loss_fn)`` triples covering every primitive."""
    a = ad.parameter(rng.standard_normal((4, 3)))
    b = ad.parameter(rng.standard_normal((3, 5)))
    c = ad.parameter(rng.standard_normal((4, 3)))
    col = ad.parameter(rng.standard_normal((4, 1)))
    row = ad.parameter(rng.standard_normal((1, 3)))
    pos = ad.parameter(rng.uniform(0.5, 2.0, (4, 3)))
    kink = ad.parameter(_away_from_zero(rng, (4, 3)))
    w = ad.tensor(rng.standard_normal((4, 3)))
    wsum = lambda t: ad.sum(t * w)  # noqa: E731
    idx = rng.integers(0, 4, size=7)
    cases = [
        ("matmul", [a, b], lambda: ad.sum(ad.sin(a @ b))),
        ("add", [a, c], lambda: wsum(a + c)),
        ("add_row_broadcast", [a, row], lambda: ad.l2sq(a + row)),
        ("sub", [a, c], lambda: ad.l2sq(a - c)),
        ("mul", [a, c], lambda: wsum(a * c)),
        ("mul_col_broadcast", [a, col], lambda: ad.l2sq(a * col)),
        ("div", [a, pos], lambda: wsum(a / pos)),
        ("neg", [a], lambda: wsum(-a)),
        ("sin", [a], lambda: wsum(ad.sin(a))),
        ("tanh", [a], lambda: wsum(ad.tanh(a))),
        ("sigmoid", [a], lambda: wsum(ad.sigmoid(a))),
        ("relu", [kink], lambda: wsum(ad.relu(kink))),
        ("abs", [kink], lambda: wsum(ad.abs(kink))),
        ("square", [a], lambda: wsum(ad.square(a))),
        ("clamp", [kink], lambda: wsum(ad.clamp(kink * 3.0, -1.0, 1.0))),
        ("sum", [a], lambda: ad.sum(ad.square(a))),
        ("mean", [a], lambda: ad.mean(ad.sin(a))),
        ("l1", [kink], lambda: ad.l1(kink)),
        ("l2sq", [a], lambda: ad.l2sq(a)),
        ("concat", [a, c], lambda: ad.l2sq(ad.sin(ad.concat([a, c], axis=1)))),
        ("take_rows", [a], lambda: ad.l2sq(ad.sin(ad.take_rows(a, idx)))),
        ("columns", [a], lambda: ad.l2sq(ad.sin(a[:, 1:3]))),
        ("rows", [a], lambda: ad.l2sq(ad.sin(ad.rows(a, slice(1, 3))))),
    ]
    return cases


def _network_templates():
    seen = {}
    for task in TASKS:
        for occl in (False, True):
            cfg = default_recipe(task, occlusion_aware=occl)
            for role in ("scene_net", "motion_net", "interf_net"):
                net = getattr(cfg, role)
                if net is None:
                    continue
                key = (net.in_dim, net.out_dim, net.hidden_layers, net.hidden_units,
                       net.activation, net.output_head, net.identity_init)
                suffix = "[occlusion-aware]" if occl else ""
                seen.setdefault(key, (f"{task}{suffix}.{role}", net))
    return list(seen.values())


def _perturb_output_layer(net, rng):
    # identity-initialised heads have zero output weights; give them a
    # generic point so every layer's gradient is exercised
    w, b = net.layers[-1]
    w.data = rng.standard_normal(w.shape) * 0.05


def _network_cases(rng, batch=8):
    cases = []
    for name, cfg in _network_templates():
        net = mlp_init(cfg, int(rng.integers(1 << 31)))
        if cfg.identity_init:
            _perturb_output_layer(net, rng)
        x = rng.uniform(-1, 1, (batch, cfg.in_dim))
        target = rng.uniform(-0.5, 0.5, (batch, cfg.out_dim))
        cases.append((f"net:{name}", net.parameters(),
                      lambda net=net, x=x, target=target: losses.recon_loss(net(x), target)))
    return cases


def _smooth_tv_points(flow, rng, steps, n=8):
    # the L1 of the Jacobian has a kink at zero; keep probes where every
    # entry is clearly nonzero so central differences stay on one side
    cand = rng.uniform(-0.9, 0.9, (64 * n, 3))
    base = flow(cand).data
    jac = np.concatenate([(flow(c).data - base) / s
                          for c, s in zip(losses.shifted_coords(cand, steps), steps)], axis=1)
    margin = np.abs(jac).min(axis=1)
    return cand[np.argsort(-margin)[:n]]


def _component_cases(rng):
    cases = []
    h = ad.parameter(np.array([[1.02, 0.03, 0.05, -0.02, 0.97, -0.04, 0.05, -0.03]]))
    xy = rng.uniform(-1, 1, (6, 2))
    wt = ad.tensor(rng.standard_normal((6, 2)))

    def homog():
        hb = ad.take_rows(h, np.zeros(6, dtype=int))
        xn, yn = motion.apply_homography(hb, xy[:, :1], xy[:, 1:])
        return ad.sum(ad.concat([xn, yn], axis=1) * wt)

    cases.append(("apply_homography", [h], homog))

    o = ad.parameter(rng.uniform(0.1, 0.9, (6, 3)))
    u3 = ad.parameter(rng.uniform(0.1, 0.9, (6, 3)))
    u1 = ad.parameter(rng.uniform(0.1, 0.9, (6, 1)))
    al = ad.parameter(rng.uniform(0.1, 0.9, (6, 1)))
    tgt = rng.uniform(0, 1, (6, 3))
    cases += [
        ("compose:additive", [o, u3], lambda: losses.recon_loss(formation.compose("additive", o, u3), tgt)),
        ("compose:fence_alpha", [o, u3, al],
         lambda: losses.recon_loss(formation.compose("fence_alpha", o, u3, al), tgt)),
        ("compose:rain_achromatic", [o, u1],
         lambda: losses.recon_loss(formation.compose("rain_achromatic", o, u1), tgt)),
        ("compose:bayer_masked", [o],
         lambda: losses.recon_loss(formation.bayer_mask(o, "RGGB", np.arange(6), np.arange(6) // 2),
                                   tgt)),
    ]

    flow = mlp_init(MlpConfig(3, 3, 2, 32, "sine"), int(rng.integers(1 << 31)))
    pts = _smooth_tv_points(flow, rng, (0.05, 0.05, 0.5))
    g1 = ad.parameter(_away_from_zero(rng, (8, 6)))
    g2 = ad.parameter(_away_from_zero(rng, (8, 6)))
    uu = ad.parameter(_away_from_zero(rng, (8, 3)))
    cases += [
        ("tv_flow_loss", flow.parameters(), lambda: losses.tv_flow_loss(flow, pts, (0.05, 0.05, 0.5))),
        ("exclusion_loss", [g1, g2], lambda: losses.exclusion_loss(g1, g2)),
        ("interference_loss", [uu], lambda: losses.interference_loss(uu)),
        ("w_l1_loss", [uu], lambda: losses.w_l1_loss(uu)),
    ]
    return cases


def run_suite(seed=0, probes_per_case=None, total_probes=100, extensive=False,
              h=DEFAULT_H, tol=DEFAULT_TOL):
    """Run every check; returns ``(results, seconds)``.

    ``total_probes`` random directions are spread over the cases (at least 2
    each); ``extensive`` multiplies the count by 10.
    """
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    results = []
    with ad.precision("float64"):
        cases = _op_cases(rng) + _component_cases(rng) + _network_cases(rng)
        if probes_per_case is None:
            probes_per_case = max(2, -(-total_probes // len(cases)))
        if extensive:
            probes_per_case *= 10
        for name, params, fn in cases:
            errs = directional_errors(fn, params, probes_per_case, rng, h=h)
            results.append(CheckResult(name, probes_per_case, max(errs), tol))
    return results, time.perf_counter() - t0

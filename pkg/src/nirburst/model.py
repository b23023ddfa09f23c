"""The fitted model: scene, motion and interference networks plus rendering."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import formation, losses, motion
from .config import TaskConfig
from .errors import IngestError, RenderError, SingularTransformError, UsageError
from .imaging import frame_times, grid_coords
from .networks import Mlp, load_weights, mlp_init, save_weights

RENDER_CHUNK = 16384
NET_FILES = {"scene": "scene.nirw", "motion": "motion.nirw", "interf": "interf.nirw"}


@dataclass
class Streams:
    """Per-sample outputs of one forward pass (tensors, batch-aligned)."""

    composite: ad.Tensor
    scene: ad.Tensor
    interf: ad.Tensor | None = None
    alpha: ad.Tensor | None = None
    w: ad.Tensor | None = None


class SeparationModel:
    def __init__(self, config: TaskConfig, scene: Mlp, motion_net: Mlp, interf: Mlp | None,
                 frame_shape):
        self.config = config
        self.scene = scene
        self.motion = motion_net
        self.interf = interf
        self.frame_shape = tuple(int(v) for v in frame_shape)  # (T, H, W)

    @classmethod
    def create(cls, config: TaskConfig, frame_shape, seed=None):
        config.validate()
        seed = config.seed if seed is None else seed
        seeds = np.random.SeedSequence(seed).spawn(3)
        with ad.precision(config.precision):
            scene = mlp_init(config.scene_net, seeds[0])
            g = mlp_init(config.motion_net, seeds[1])
            interf = mlp_init(config.interf_net, seeds[2]) if config.interf_net else None
        return cls(config, scene, g, interf, frame_shape)

    @property
    def kind(self):
        return self.config.motion_kind

    def networks(self):
        nets = {"scene": self.scene, "motion": self.motion}
        if self.interf is not None:
            nets["interf"] = self.interf
        return nets

    def parameters(self):
        return [p for net in self.networks().values() for p in net.parameters()]

    def fd_steps(self):
        T, H, W = self.frame_shape
        return losses.fd_steps(H, W, T)

    # ------------------------------------------------------------ forward

    def motion_output(self, coords):
        if self.kind == "homography":
            return motion.homography_params(self.motion, coords[:, 2])
        return self.motion(coords)

    def streams(self, coords, motion_out=None) -> Streams:
        """Evaluate every stream at ``B x 3`` frame coordinates ``(x, y, t)``."""
        coords = np.asarray(coords, dtype=ad.get_dtype())
        if motion_out is None:
            motion_out = self.motion_output(coords)
        canon = motion.canonical_coords(self.kind, self.motion, coords,
                                        projective=self.config.projective, motion_out=motion_out)
        scene = self.scene(canon)
        interf = alpha = None
        if self.interf is not None:
            raw = self.interf(coords)
            interf, alpha = formation.split_interference(self.config.formation, raw)
        kind = self.config.formation
        if kind in ("scene_only", "bayer_masked"):
            comp = scene
        else:
            comp = formation.compose(kind, scene, interf, alpha)
        w = canon[:, 2:3] if self.kind == "flow_w" else None
        return Streams(comp, scene, interf, alpha, w)

    def objective(self, coords, target, pixel_rc=None):
        """Loss tensor and term tensors for one batch (must run inside a tape)."""
        cfg = self.config
        weights = cfg.weights
        coords = np.asarray(coords, dtype=ad.get_dtype())
        B = len(coords)
        hx, hy, ht = self.fd_steps()
        flow = self.kind != "homography"
        need_excl = weights.excl > 0 and self.interf is not None and "excl" in losses.TASK_TERMS[cfg.task]
        need_tv = flow and weights.tvflow > 0 and "tvflow" in losses.TASK_TERMS[cfg.task]

        blocks = [coords]
        if need_excl or need_tv:
            blocks += losses.shifted_coords(coords, (hx, hy, ht), dims=(0, 1))
        if need_tv:
            blocks += losses.shifted_coords(coords, (hx, hy, ht), dims=(2,))
        stacked = np.concatenate(blocks) if len(blocks) > 1 else coords
        mo = self.motion_output(stacked)

        n_scene = 3 if need_excl else 1
        scene_pts = stacked[: n_scene * B]
        mo_scene = mo if len(blocks) == n_scene else ad.rows(mo, slice(0, n_scene * B))
        st = self.streams(scene_pts, motion_out=mo_scene)

        def block(t, i):
            if t is None:
                return None
            return t if n_scene == 1 else ad.rows(t, slice(i * B, (i + 1) * B))

        pred = block(st.composite, 0)
        if cfg.formation == "bayer_masked":
            if pixel_rc is None:
                raise UsageError("bayer_masked formation needs pixel positions")
            pred = formation.bayer_mask(pred, cfg.cfa, pixel_rc[0], pixel_rc[1])
        terms = {"recon": losses.recon_loss(pred, target)}

        if self.interf is not None:
            u0 = block(st.interf, 0)
            if st.alpha is not None:
                u0 = ad.concat([block(st.alpha, 0), u0], axis=1)
            terms["interf"] = losses.interference_loss(u0)
        if need_excl:
            j_scene = losses.fd_jacobian(block(st.scene, 0), [block(st.scene, 1), block(st.scene, 2)],
                                         (hx, hy))
            j_interf = losses.fd_jacobian(block(st.interf, 0), [block(st.interf, 1), block(st.interf, 2)],
                                          (hx, hy))
            terms["excl"] = losses.exclusion_loss(j_scene, j_interf)
        if need_tv:
            mo_blocks = [ad.rows(mo, slice(i * B, (i + 1) * B)) for i in range(4)]
            jac = losses.fd_jacobian(mo_blocks[0], mo_blocks[1:], (hx, hy, ht))
            terms["tvflow"] = losses.tv_from_jacobian(jac)
        if self.kind == "flow_w" and weights.w > 0:
            terms["w"] = losses.w_l1_loss(block(st.w, 0))
        return losses.total_loss(cfg.task, terms, weights)

    # ---------------------------------------------------------- rendering

    def _eval(self, coords, fn):
        out = []
        for lo in range(0, len(coords), RENDER_CHUNK):
            try:
                out.append(fn(coords[lo:lo + RENDER_CHUNK]))
            except SingularTransformError as exc:
                raise SingularTransformError(str(exc), index=lo + (exc.index or 0)) from exc
        return out

    def render_frame(self, t, resolution=None):
        """All streams of frame ``t`` (normalized time) on a regular grid.

        Returns a dict of ``H x W x C`` float arrays keyed by ``composite``,
        ``scene`` and, where present, ``interf``, ``alpha``, ``w``.
        """
        T, H, W = self.frame_shape
        h, w = resolution or (H, W)
        coords = grid_coords(h, w, t=t)
        with ad.precision(self.config.precision):
            try:
                parts = self._eval(coords, self.streams)
            except SingularTransformError as exc:
                raise RenderError(f"near-singular homography at render pixel "
                                  f"{_pixel(exc.index, w)} of frame t={t}") from exc
        result = {}
        for key in ("composite", "scene", "interf", "alpha", "w"):
            vals = [getattr(p, key) for p in parts]
            if vals[0] is None:
                continue
            arr = np.concatenate([v.data for v in vals]).astype(np.float64)
            result[key] = arr.reshape(h, w, -1)
        return result

    def render_frame_index(self, k, resolution=None):
        return self.render_frame(frame_times(self.frame_shape[0])[k], resolution)

    def render_canonical(self, window=None, resolution=None, w=None):
        """Sample the scene network directly on canonical coordinates."""
        window = tuple(window) if window is not None else self.default_window()
        if resolution is None:
            resolution = self.default_canvas(window)
        h, wd = resolution
        pts = grid_coords(h, wd, window=window)
        if self.kind == "flow_w":
            wval = self.median_w() if w is None else float(w)
            pts = np.c_[pts, np.full(len(pts), wval)]
        with ad.precision(self.config.precision):
            parts = self._eval(np.asarray(pts, dtype=ad.get_dtype()), self.scene)
        return np.concatenate([p.data for p in parts]).astype(np.float64).reshape(h, wd, -1)

    def frame_homographies(self):
        if self.kind != "homography":
            raise UsageError("frame homographies exist only for the homography model")
        ts = frame_times(self.frame_shape[0])
        with ad.precision(self.config.precision):
            out = self.motion(ts.reshape(-1, 1).astype(ad.get_dtype())).data
        return [motion.params_to_matrix(row) for row in out]

    def default_window(self):
        """Canonical extent covering every frame (homography) or the frame itself."""
        if self.kind != "homography":
            return (-1.0, -1.0, 1.0, 1.0)
        T, H, W = self.frame_shape
        xs, ys = motion.pixel_extent_corners(H, W)
        pts = []
        for m in self.frame_homographies():
            pts.append(motion.project_points(m, np.c_[xs, ys]))
        pts = np.concatenate(pts)
        return (float(pts[:, 0].min()), float(pts[:, 1].min()),
                float(pts[:, 0].max()), float(pts[:, 1].max()))

    def default_canvas(self, window, scale=1.0):
        T, H, W = self.frame_shape
        x0, y0, x1, y1 = window
        return (max(1, int(round(H * (y1 - y0) / 2.0 * scale))),
                max(1, int(round(W * (x1 - x0) / 2.0 * scale))))

    def median_w(self):
        """Median fitted ``w`` over every input pixel (occlusion-aware only)."""
        if self.kind != "flow_w":
            raise UsageError("w exists only for the occlusion-aware model")
        T, H, W = self.frame_shape
        vals = []
        with ad.precision(self.config.precision):
            for t in frame_times(T):
                vals.append(np.concatenate([o.data[:, 2] for o in
                                            self._eval(grid_coords(H, W, t=t).astype(ad.get_dtype()),
                                                       self.motion)]))
        return float(np.median(np.concatenate(vals)))

    # -------------------------------------------------------- persistence

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name, net in self.networks().items():
            save_weights(net, directory / NET_FILES[name])
        meta = {"config": self.config.to_dict(), "frame_shape": list(self.frame_shape)}
        (directory / "model.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
        return directory

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        try:
            meta = json.loads((directory / "model.json").read_text())
        except (OSError, ValueError) as exc:
            raise IngestError(f"cannot read model metadata in {directory}: {exc}") from exc
        config = TaskConfig.from_dict(meta["config"])
        with ad.precision(config.precision):
            scene = load_weights(config.scene_net, directory / NET_FILES["scene"])
            g = load_weights(config.motion_net, directory / NET_FILES["motion"])
            interf = (load_weights(config.interf_net, directory / NET_FILES["interf"])
                      if config.interf_net else None)
        return cls(config, scene, g, interf, meta["frame_shape"])


def _pixel(index, width):
    if index is None:
        return "?"
    return f"(row {index // width}, col {index % width})"

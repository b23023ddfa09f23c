"""Task recipes and the flat ``section.key = value`` configuration format."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path

from .errors import ConfigError
from .formation import CFA_PATTERNS, interference_channels
from .losses import LossWeights
from .motion import MOTION_KINDS, canonical_dim, motion_out_dim
from .networks import MlpConfig

TASKS = ("moire", "reflection", "fence", "rain", "denoise", "fuse", "sr_demosaic")
SEPARATION_TASKS = ("moire", "reflection", "fence", "rain", "denoise")
NORMALIZATIONS = ("signed", "unit")
PRECISIONS = ("float32", "float64")

FORMATION_FOR_TASK = {
    "moire": "additive",
    "reflection": "additive",
    "fence": "fence_alpha",
    "rain": "rain_achromatic",
    "denoise": "additive",
    "fuse": "scene_only",
    "sr_demosaic": "bayer_masked",
}


@dataclass
class TaskConfig:
    task: str
    motion_kind: str
    formation: str
    normalization: str
    scene_net: MlpConfig
    motion_net: MlpConfig
    interf_net: MlpConfig | None
    weights: LossWeights
    iterations: int
    batch_fraction: float
    lr: float = 1e-4
    seed: int = 0
    precision: str = "float32"
    projective: bool = True
    cfa: str | None = None
    black_level: float = 0.0
    white_level: float = 65535.0
    checkpoint_every: int = 0

    def validate(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}")
        if self.motion_kind not in MOTION_KINDS:
            raise ConfigError(f"unknown motion kind {self.motion_kind!r}")
        if self.normalization not in NORMALIZATIONS:
            raise ConfigError(f"unknown normalization {self.normalization!r}")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"unknown precision {self.precision!r}")
        if not isinstance(self.iterations, int) or self.iterations < 1:
            raise ConfigError("iterations must be an integer >= 1")
        if not (0 < self.batch_fraction <= 1):
            raise ConfigError("batch_fraction must be in (0, 1]")
        if not (self.lr > 0 and math.isfinite(self.lr)):
            raise ConfigError("lr must be positive")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")
        if self.cfa is not None and self.cfa not in CFA_PATTERNS:
            raise ConfigError(f"unknown CFA pattern {self.cfa!r}")
        if self.formation == "bayer_masked" and self.cfa is None:
            raise ConfigError("bayer_masked formation needs a CFA pattern")
        if not self.white_level > self.black_level:
            raise ConfigError("white_level must exceed black_level")
        self.weights.__post_init__()
        for net in (self.scene_net, self.motion_net, self.interf_net):
            if net is not None:
                net.validate()
        if self.motion_net.out_dim != motion_out_dim(self.motion_kind):
            raise ConfigError("motion network output does not match the motion kind")
        want_in = 1 if self.motion_kind == "homography" else 3
        if self.motion_net.in_dim != want_in:
            raise ConfigError("motion network input does not match the motion kind")
        if self.scene_net.in_dim != canonical_dim(self.motion_kind) or self.scene_net.out_dim != 3:
            raise ConfigError("scene network dimensions do not match the motion kind")
        n_interf = interference_channels(self.formation)
        if n_interf == 0 and self.interf_net is not None:
            raise ConfigError(f"formation {self.formation} takes no interference network")
        if n_interf and (self.interf_net is None or self.interf_net.out_dim != n_interf
                         or self.interf_net.in_dim != 3):
            raise ConfigError(f"formation {self.formation} needs a 3 -> {n_interf} interference network")
        return self

    def to_dict(self):
        d = asdict(self)
        d["scene_net"] = self.scene_net.to_dict()
        d["motion_net"] = self.motion_net.to_dict()
        d["interf_net"] = self.interf_net.to_dict() if self.interf_net else None
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["scene_net"] = MlpConfig.from_dict(d["scene_net"])
        d["motion_net"] = MlpConfig.from_dict(d["motion_net"])
        d["interf_net"] = MlpConfig.from_dict(d["interf_net"]) if d.get("interf_net") else None
        d["weights"] = LossWeights(**d["weights"])
        return cls(**d).validate()


def _sine(in_dim, out_dim, layers, units, head="linear", **kw):
    return MlpConfig(in_dim, out_dim, layers, units, "sine", 30.0, head, **kw)


def _homography_net():
    return MlpConfig(1, 8, 2, 256, "relu", 30.0, "linear", identity_init=True,
                     output_bias=(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0))


def motion_net_for(kind, layers=4, units=256):
    if kind == "homography":
        return _homography_net()
    return _sine(3, motion_out_dim(kind), layers, units, identity_init=True)


def default_recipe(task: str, occlusion_aware: bool = False) -> TaskConfig:
    """Fully populated configuration for ``task`` following the published settings."""
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}; expected one of {TASKS}")
    formation = FORMATION_FOR_TASK[task]
    if task == "moire":
        cfg = TaskConfig(
            task, "homography", formation, "signed",
            scene_net=_sine(2, 3, 4, 256, "tanh_signed"),
            motion_net=_homography_net(),
            interf_net=_sine(3, 3, 4, 128, "tanh_signed"),
            weights=LossWeights(interf=0.001, excl=0.002),
            iterations=3000, batch_fraction=1 / 4)
    elif task in ("reflection", "fence"):
        kind = "flow_w" if occlusion_aware else "flow"
        n_int = interference_channels(formation)
        bias = (-3.0, 0.0, 0.0, 0.0) if task == "fence" else None
        cfg = TaskConfig(
            task, kind, formation, "unit",
            scene_net=_sine(canonical_dim(kind), 3, 4, 256, "sigmoid_unit"),
            motion_net=motion_net_for(kind, 4, 256),
            interf_net=_sine(3, n_int, 4, 256, "sigmoid_unit", output_bias=bias),
            weights=LossWeights(interf=0.1, tvflow=0.02, excl=0.001),
            iterations=5000, batch_fraction=1 / 32)
    elif task == "rain":
        cfg = TaskConfig(
            task, "flow_w", formation, "unit",
            scene_net=_sine(3, 3, 5, 256, "sigmoid_unit"),
            motion_net=motion_net_for("flow_w", 5, 256),
            interf_net=_sine(3, 1, 5, 256, "sigmoid_unit", output_bias=(-3.0,)),
            weights=LossWeights(interf=0.01, tvflow=0.02),
            iterations=5000, batch_fraction=1 / 32)
    elif task == "denoise":
        kind = "flow_w" if occlusion_aware else "flow"
        cfg = TaskConfig(
            task, kind, formation, "unit",
            scene_net=_sine(canonical_dim(kind), 3, 4, 256, "sigmoid_unit"),
            motion_net=motion_net_for(kind, 4, 256),
            interf_net=_sine(3, 3, 4, 128, "tanh_signed"),
            weights=LossWeights(interf=0.001, excl=0.002),
            iterations=3000, batch_fraction=1 / 4)
    elif task == "fuse":
        cfg = TaskConfig(
            task, "homography", formation, "unit",
            scene_net=_sine(2, 3, 4, 256, "sigmoid_unit"),
            motion_net=_homography_net(),
            interf_net=None,
            weights=LossWeights(),
            iterations=3000, batch_fraction=1 / 4)
    else:
        kind = "flow_w" if occlusion_aware else "flow"
        cfg = TaskConfig(
            task, kind, formation, "unit",
            scene_net=_sine(canonical_dim(kind), 3, 4, 256, "sigmoid_unit"),
            motion_net=motion_net_for(kind, 4, 256),
            interf_net=None,
            weights=LossWeights(tvflow=0.02),
            iterations=3000, batch_fraction=1 / 4, cfa="RGGB")
    return cfg.validate()


def with_motion(cfg: TaskConfig, kind: str) -> TaskConfig:
    """Switch motion model, rebuilding the networks whose shapes depend on it."""
    if kind not in MOTION_KINDS:
        raise ConfigError(f"unknown motion kind {kind!r}")
    if kind == cfg.motion_kind:
        return cfg
    cfg = copy.deepcopy(cfg)
    old = cfg.motion_net
    if kind == "homography":
        cfg.motion_net = _homography_net()
    elif old.in_dim == 3:
        cfg.motion_net = replace(old, out_dim=motion_out_dim(kind))
    else:
        cfg.motion_net = motion_net_for(kind, cfg.scene_net.hidden_layers,
                                        cfg.scene_net.hidden_units)
    cfg.scene_net = replace(cfg.scene_net, in_dim=canonical_dim(kind))
    cfg.motion_kind = kind
    return cfg


# ------------------------------------------------------- flat config files

_NET_SECTIONS = {"scene_net": "scene_net", "motion_net": "motion_net", "interf_net": "interf_net"}
_NET_KEYS = {"hidden_layers": int, "hidden_units": int, "activation": str, "omega0": float,
             "output_head": str}
_TOP_KEYS = {
    "task.name": ("task", str),
    "train.iterations": ("iterations", int),
    "train.batch_fraction": ("batch_fraction", float),
    "train.lr": ("lr", float),
    "train.seed": ("seed", int),
    "train.precision": ("precision", str),
    "train.checkpoint_every": ("checkpoint_every", int),
    "motion.kind": ("motion_kind", str),
    "homography.projective": ("projective", bool),
    "data.normalization": ("normalization", str),
    "data.cfa": ("cfa", str),
    "data.black_level": ("black_level", float),
    "data.white_level": ("white_level", float),
}
_WEIGHT_KEYS = ("interf", "tvflow", "excl", "w")


def _parse_value(raw: str, kind, key):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            if "/" in raw:
                num, den = raw.split("/", 1)
                return float(num) / float(den)
            return float(raw)
        if raw.lower() in ("none", "null", ""):
            return None
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def parse_flat_config(text: str) -> dict:
    """Parse ``section.key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if "." not in key:
            raise ConfigError(f"line {lineno}: key {key!r} lacks a section")
        out[key] = value
    return out


def read_flat_config(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_flat_config(text)


def apply_overrides(cfg: TaskConfig, values: dict) -> TaskConfig:
    """Return a copy of ``cfg`` with dotted-key overrides applied and validated.

    Values may be strings (from files) or already-typed python values.
    """
    cfg = copy.deepcopy(cfg)
    motion = values.get("motion.kind")
    if motion is not None:
        cfg = with_motion(cfg, _parse_value(str(motion), str, "motion.kind"))
    for key, value in values.items():
        if key == "motion.kind" or value is None:
            continue
        if key in _TOP_KEYS:
            attr, kind = _TOP_KEYS[key]
            setattr(cfg, attr, _parse_value(str(value), kind, key))
        elif key.startswith("weights.") and key[8:] in _WEIGHT_KEYS:
            setattr(cfg.weights, key[8:], _parse_value(str(value), float, key))
        elif key.split(".", 1)[0] in _NET_SECTIONS and key.split(".", 1)[1] in _NET_KEYS:
            section, name = key.split(".", 1)
            net = getattr(cfg, section)
            if net is None:
                raise ConfigError(f"{key}: this task has no {section}")
            setattr(cfg, section, replace(net, **{name: _parse_value(str(value), _NET_KEYS[name], key)}))
        else:
            raise ConfigError(f"unknown config key {key!r}")
    try:
        cfg.weights = LossWeights(**asdict(cfg.weights))
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg.validate()


def to_flat(cfg: TaskConfig) -> str:
    """Serialize the overridable fields of ``cfg`` in the flat format."""
    lines = [f"task.name = {cfg.task}"]
    for key, (attr, _) in _TOP_KEYS.items():
        if key == "task.name":
            continue
        value = getattr(cfg, attr)
        lines.append(f"{key} = {'none' if value is None else repr(value) if isinstance(value, float) else value}")
    for name in _WEIGHT_KEYS:
        lines.append(f"weights.{name} = {getattr(cfg.weights, name)!r}")
    for section in _NET_SECTIONS:
        net = getattr(cfg, section)
        if net is None:
            continue
        for name in _NET_KEYS:
            value = getattr(net, name)
            lines.append(f"{section}.{name} = {value!r}" if isinstance(value, float)
                         else f"{section}.{name} = {value}")
    return "\n".join(lines) + "\n"

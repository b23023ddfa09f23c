"""Coordinate MLPs (SIREN and ReLU) and the NIRW weight format."""

from __future__ import annotations

import struct
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, IngestError, UsageError

ACTIVATIONS = ("sine", "relu")
HEADS = ("linear", "tanh_signed", "sigmoid_unit")

NIRW_MAGIC = b"NIRW"
NIRW_VERSION = 1


@dataclass
class MlpConfig:
    in_dim: int
    out_dim: int
    hidden_layers: int = 4
    hidden_units: int = 256
    activation: str = "sine"
    omega0: float = 30.0
    output_head: str = "linear"
    # zero output weights and start from ``output_bias`` (identity transform
    # for motion networks)
    identity_init: bool = False
    output_bias: tuple | None = None

    def validate(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise ConfigError("in_dim and out_dim must be >= 1")
        if self.hidden_layers < 1 or self.hidden_units < 1:
            raise ConfigError("hidden_layers and hidden_units must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.output_head not in HEADS:
            raise ConfigError(f"unknown output head {self.output_head!r}")
        if self.activation == "sine" and not self.omega0 > 0:
            raise ConfigError("omega0 must be positive for sine networks")
        if self.output_bias is not None and len(self.output_bias) != self.out_dim:
            raise ConfigError("output_bias length must equal out_dim")
        return self

    def to_dict(self):
        d = asdict(self)
        if d["output_bias"] is not None:
            d["output_bias"] = list(d["output_bias"])
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("output_bias") is not None:
            d["output_bias"] = tuple(d["output_bias"])
        return cls(**d)


class Mlp:
    """Fully connected network; ``layers`` holds ``(W[in x out], b[1 x out])``."""

    def __init__(self, config: MlpConfig, layers):
        self.config = config
        self.layers = layers
        for (w0, _), (w1, _) in zip(layers, layers[1:]):
            if w0.shape[1] != w1.shape[0]:
                raise UsageError("layer shapes do not chain")

    def parameters(self):
        return [p for layer in self.layers for p in layer]

    def __call__(self, coords):
        return mlp_forward(self, coords)

    def copy(self):
        layers = [(ad.parameter(w.data.copy()), ad.parameter(b.data.copy()))
                  for w, b in self.layers]
        return Mlp(self.config, layers)

    def __repr__(self):
        c = self.config
        return (f"Mlp({c.in_dim}->{c.hidden_layers}x{c.hidden_units} {c.activation}"
                f"->{c.out_dim}, head={c.output_head})")


def mlp_init(config: MlpConfig, seed) -> Mlp:
    config.validate()
    rng = np.random.default_rng(seed)
    dims = [config.in_dim] + [config.hidden_units] * config.hidden_layers + [config.out_dim]
    layers = []
    n_layers = len(dims) - 1
    for i in range(n_layers):
        fan_in, fan_out = dims[i], dims[i + 1]
        if config.activation == "sine":
            bound = 1.0 / fan_in if i == 0 else np.sqrt(6.0 / fan_in) / config.omega0
        else:
            bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        bb = 1.0 / np.sqrt(fan_in)
        b = rng.uniform(-bb, bb, size=(1, fan_out))
        if i == n_layers - 1:
            if config.identity_init:
                w = np.zeros_like(w)
            if config.output_bias is not None:
                b = np.asarray(config.output_bias, dtype=float).reshape(1, fan_out)
            elif config.identity_init:
                b = np.zeros_like(b)
        layers.append((ad.parameter(w, name=f"W{i}"), ad.parameter(b, name=f"b{i}")))
    return Mlp(config, layers)


def mlp_forward(net: Mlp, coords) -> Tensor:
    cfg = net.config
    x = coords if isinstance(coords, Tensor) else ad.tensor(coords)
    if x.ndim != 2 or x.shape[1] != cfg.in_dim:
        raise UsageError(f"expected coords of shape (B, {cfg.in_dim}), got {x.shape}")
    last = len(net.layers) - 1
    for i, (w, b) in enumerate(net.layers):
        x = ad.add(ad.matmul(x, w), b)
        if i == last:
            break
        if cfg.activation == "sine":
            x = ad.sin(ad.mul(x, cfg.omega0))
        else:
            x = ad.relu(x)
    if cfg.output_head == "tanh_signed":
        x = ad.tanh(x)
    elif cfg.output_head == "sigmoid_unit":
        x = ad.sigmoid(x)
    return x


# ------------------------------------------------------------- checkpoints


def save_weights(net: Mlp, path) -> None:
    with open(path, "wb") as fh:
        fh.write(weights_to_bytes(net))


def weights_to_bytes(net: Mlp) -> bytes:
    parts = [NIRW_MAGIC, struct.pack("<I", NIRW_VERSION)]
    for w, b in net.layers:
        rows, cols = w.shape
        parts.append(struct.pack("<II", rows, cols))
        parts.append(np.ascontiguousarray(w.data, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(b.data, dtype="<f4").reshape(-1).tobytes())
    return b"".join(parts)


def read_weights(path):
    """Return the list of ``(W, b)`` float32 arrays stored in a NIRW file."""
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise IngestError(f"cannot read {path}: {exc}") from exc
    if buf[:4] != NIRW_MAGIC:
        raise IngestError(f"{path}: not a NIRW file")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != NIRW_VERSION:
        raise IngestError(f"{path}: unsupported NIRW version {version}")
    off = 8
    layers = []
    while off < len(buf):
        if off + 8 > len(buf):
            raise IngestError(f"{path}: truncated layer header")
        rows, cols = struct.unpack_from("<II", buf, off)
        off += 8
        nw, nb = rows * cols * 4, cols * 4
        if off + nw + nb > len(buf):
            raise IngestError(f"{path}: truncated layer payload")
        w = np.frombuffer(buf, dtype="<f4", count=rows * cols, offset=off).reshape(rows, cols)
        off += nw
        b = np.frombuffer(buf, dtype="<f4", count=cols, offset=off).reshape(1, cols)
        off += nb
        layers.append((w.copy(), b.copy()))
    return layers


def load_weights(config: MlpConfig, path) -> Mlp:
    arrays = read_weights(path)
    config.validate()
    expected = [config.in_dim] + [config.hidden_units] * config.hidden_layers + [config.out_dim]
    shapes = [w.shape for w, _ in arrays]
    if shapes != list(zip(expected[:-1], expected[1:])):
        raise IngestError(f"{path}: layer shapes {shapes} do not match the network config")
    layers = [(ad.parameter(w), ad.parameter(b)) for w, b in arrays]
    return Mlp(config, layers)

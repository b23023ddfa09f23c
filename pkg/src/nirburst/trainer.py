"""Per-sequence optimization: batch sampling, steps, fitting, checkpoints."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import TaskConfig
from .errors import ConfigError, DivergedError, IngestError, NonFiniteError, UsageError
from .imaging import BurstSequence, frame_times, pixel_centers
from .losses import LossReport
from .model import SeparationModel

log = logging.getLogger(__name__)


@dataclass
class CoordinateBatch:
    coords: np.ndarray  # B x 3 normalized (x, y, t)
    target: np.ndarray  # B x C
    frame: np.ndarray
    row: np.ndarray
    col: np.ndarray

    def __len__(self):
        return len(self.coords)


def batch_size(seq: BurstSequence, fraction: float) -> int:
    return math.ceil(fraction * seq.H * seq.W)


def sample_batch(seq: BurstSequence, fraction: float, rng) -> CoordinateBatch:
    """Draw pixels uniformly with replacement over all frames jointly."""
    if not 0 < fraction <= 1:
        raise UsageError("batch fraction must be in (0, 1]")
    T, H, W, _ = seq.frames.shape
    if T * H * W == 0:
        raise UsageError("empty sequence")
    n = batch_size(seq, fraction)
    flat = rng.integers(0, T * H * W, size=n)
    k, rem = np.divmod(flat, H * W)
    i, j = np.divmod(rem, W)
    coords = np.stack([pixel_centers(W)[j], pixel_centers(H)[i], frame_times(T)[k]], axis=1)
    return CoordinateBatch(coords, seq.frames[k, i, j], k, i, j)


class Trainer:
    """Holds the mutable state of one fitting job."""

    def __init__(self, model: SeparationModel, seq: BurstSequence, rng=None):
        self.model = model
        self.seq = seq
        cfg = model.config
        self.rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.params = model.parameters()
        self.adam = ad.AdamState(lr=cfg.lr)
        self.step = 0

    def train_step(self, batch: CoordinateBatch | None = None) -> LossReport:
        cfg = self.model.config
        if batch is None:
            batch = sample_batch(self.seq, cfg.batch_fraction, self.rng)
        with ad.precision(cfg.precision):
            target = batch.target.astype(ad.get_dtype())
            try:
                with ad.Tape() as tape:
                    loss, report = self.model.objective(batch.coords, target, (batch.row, batch.col))
            except (NonFiniteError, ArithmeticError) as exc:
                raise DivergedError(self.step, f"training diverged at step {self.step}: {exc}") from exc
            if not math.isfinite(report.total):
                raise DivergedError(self.step)
            for p in self.params:
                p.grad = None
            ad.backward(loss, tape)
            grads = [p.grad for p in self.params]
            for g in grads:
                if g is not None and not np.all(np.isfinite(g)):
                    raise DivergedError(self.step, f"non-finite gradient at step {self.step}")
            ad.adam_step(self.params, grads, self.adam)
        self.step += 1
        return report

    # --------------------------------------------------------- checkpoints

    def save_checkpoint(self, directory) -> Path:
        directory = Path(directory)
        self.model.save(directory)
        state = {f"m{i}": m for i, m in enumerate(self.adam.m)}
        state.update({f"v{i}": v for i, v in enumerate(self.adam.v)})
        np.savez(directory / "adam.npz", **state)
        meta = {
            "step": self.step,
            "adam_step": self.adam.step,
            "lr": self.adam.lr,
            "rng": self.rng.bit_generator.state,
        }
        (directory / "trainer.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
        return directory

    @classmethod
    def from_checkpoint(cls, directory, seq: BurstSequence):
        directory = Path(directory)
        model = SeparationModel.load(directory)
        try:
            meta = json.loads((directory / "trainer.json").read_text())
            arrays = np.load(directory / "adam.npz")
        except (OSError, ValueError) as exc:
            raise IngestError(f"cannot read trainer state in {directory}: {exc}") from exc
        rng = np.random.default_rng()
        rng.bit_generator.state = meta["rng"]
        tr = cls(model, seq, rng=rng)
        tr.step = meta["step"]
        tr.adam.step = meta["adam_step"]
        tr.adam.lr = meta["lr"]
        n = len(tr.params)
        if tr.adam.step:
            tr.adam.m = [arrays[f"m{i}"].copy() for i in range(n)]
            tr.adam.v = [arrays[f"v{i}"].copy() for i in range(n)]
        return tr


def check_compatible(seq: BurstSequence, config: TaskConfig):
    if seq.normalization != config.normalization:
        raise ConfigError(f"burst normalization {seq.normalization!r} does not match the task's "
                          f"{config.normalization!r}")
    if config.formation == "bayer_masked" and seq.cfa is None:
        raise ConfigError("bayer_masked formation needs a raw CFA burst")
    if seq.C != 3:
        raise ConfigError(f"expected 3-channel frames, got {seq.C}")


def fit(seq: BurstSequence, config: TaskConfig, log_path=None, checkpoint_dir=None,
        trainer: Trainer | None = None, progress=None):
    """Optimize a fresh model (or continue ``trainer``) for ``config.iterations`` steps.

    Returns ``(model, records)`` where ``records`` holds one dict per step.
    With ``checkpoint_dir`` and ``config.checkpoint_every > 0`` the state is
    saved every that many steps; on divergence the last checkpoint is kept and
    its path is attached to the raised :class:`DivergedError`.
    """
    config.validate()
    check_compatible(seq, config)
    if trainer is None:
        model = SeparationModel.create(config, (seq.T, seq.H, seq.W))
        trainer = Trainer(model, seq)
    records = []
    last_ckpt = None
    fh = open(log_path, "a") if log_path else None
    t0 = time.perf_counter()
    try:
        while trainer.step < config.iterations:
            try:
                report = trainer.train_step()
            except DivergedError as exc:
                exc.checkpoint = last_ckpt
                raise
            rec = {"step": trainer.step - 1, **report.as_record(),
                   "wall": round(time.perf_counter() - t0, 6)}
            records.append(rec)
            if fh:
                fh.write(json.dumps(rec) + "\n")
            if progress:
                progress(rec)
            every = config.checkpoint_every
            if checkpoint_dir and every and trainer.step % every == 0:
                last_ckpt = trainer.save_checkpoint(checkpoint_dir)
    finally:
        if fh:
            fh.close()
    log.info("fit finished: %d steps, final loss %.6g", trainer.step,
             records[-1]["total"] if records else float("nan"))
    return trainer.model, records

"""Epoch loop and latent-dimension sweep."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from sfml.dataset import epoch_seed, resample_batches
from sfml.losses import LossWeights, batch_loss_and_grads
from sfml.neural import (
    DECODER_HIDDEN,
    ENCODER_HIDDEN,
    AdamState,
    FmlModel,
    NonFiniteError,
    adam_step,
    gradients,
    normalization_from_pairs,
)

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e6


class TrainingError(RuntimeError):
    """Training stopped on a non-finite or exploding loss."""

    def __init__(self, message, epoch=None, batch=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    n_batches: int = 100
    batch_size: int = 2000
    weights: LossWeights = field(default_factory=LossWeights)
    lr: float = 1e-3
    seed: int = 0
    latent_dim: int = 1
    encoder_hidden: tuple = ENCODER_HIDDEN
    decoder_hidden: tuple = DECODER_HIDDEN
    deterministic: bool = True
    patience: int | None = None
    ema_decay: float | None = 0.999

    def __post_init__(self):
        if self.epochs < 1 or self.n_batches < 1 or self.batch_size < 1 or self.latent_dim < 1:
            raise ValueError("epochs, n_batches, batch_size and latent_dim must be positive")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.ema_decay is not None and not 0 < self.ema_decay < 1:
            raise ValueError("ema_decay must lie in (0, 1)")

    def as_dict(self):
        d = dataclasses.asdict(self)
        d["weights"] = self.weights.as_dict()
        d["encoder_hidden"] = list(self.encoder_hidden)
        d["decoder_hidden"] = list(self.decoder_hidden)
        return d

    def digest(self):
        return hashlib.sha256(json.dumps(self.as_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class EpochRecord:
    epoch: int
    mse: float
    kde: float
    moment: float
    total: float
    seconds: float


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    steps: int = 0
    skipped_steps: int = 0
    checksum: str = ""

    def __len__(self):
        return len(self.records)

    @property
    def final_mse(self):
        return self.records[-1].mse

    def column(self, name):
        return np.array([getattr(r, name) for r in self.records])

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "mse", "kde", "moment", "total", "seconds"])
            for r in self.records:
                w.writerow([r.epoch, repr(r.mse), repr(r.kde), repr(r.moment), repr(r.total), f"{r.seconds:.6f}"])


def init_model(store, cfg):
    """Identity-initialized model with input normalization fitted to ``store``."""
    shift, scale, step_scale = normalization_from_pairs(store.x0, store.x1)
    return FmlModel.initialized(
        store.dim,
        cfg.latent_dim,
        store.dt,
        seed=cfg.seed,
        encoder_hidden=cfg.encoder_hidden,
        decoder_hidden=cfg.decoder_hidden,
        shift=shift,
        scale=scale,
        step_scale=step_scale,
    )


def train(store, cfg, model=None, callback=None):
    """Fit encoder and decoder on ``store``; one Adam step per batch.

    A fresh kNN batch plan is drawn at the start of every epoch from a seed
    derived from ``(cfg.seed, epoch)``. With ``cfg.ema_decay`` set, the
    returned parameters are an exponential moving average of the Adam
    iterates. ``callback(epoch, record, model)`` runs after each epoch and
    sees the parameters that would be returned at that point. Returns
    ``(model, history)``.
    """
    if len(store) == 0:
        raise ValueError("empty pair store")
    model = init_model(store, cfg) if model is None else model
    w = cfg.weights
    theta = model.get_params()
    state = AdamState.zeros(theta.size)
    ema = theta.copy() if cfg.ema_decay else None
    hist = TrainHistory()
    best, stale = np.inf, 0
    batch_size = min(cfg.batch_size, len(store))
    n_batches = min(cfg.n_batches, len(store))

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        plan = resample_batches(store, n_batches, batch_size, epoch_seed(cfg.seed, epoch), epoch=epoch)
        sums = np.zeros(4)
        for b, idx in enumerate(plan.batches):
            parts = {}

            def loss_fn(z, pred, target):
                total, dz, dpred, p = batch_loss_and_grads(z, pred, target, w)
                parts.update(p)
                return total, dz, dpred

            try:
                value, grad, _, _ = gradients(model, store.x0[idx], store.x1[idx], loss_fn)
            except NonFiniteError as exc:
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}", epoch, b) from exc
            if value > DIVERGENCE_LIMIT:
                raise TrainingError(f"loss {value:.3g} exceeds {DIVERGENCE_LIMIT:g} at epoch {epoch}, batch {b}", epoch, b)
            try:
                theta, state = adam_step(theta, grad, state, lr=cfg.lr)
            except NonFiniteError:
                hist.skipped_steps += 1
                log.warning("skipped non-finite Adam step at epoch %d batch %d", epoch, b)
            else:
                model.set_params(theta)
                hist.steps += 1
                if ema is not None:
                    ema += (1.0 - cfg.ema_decay) * (theta - ema)
            sums += (parts["mse"], parts["kde"], parts["moment"], parts["total"])
        sums /= len(plan.batches)
        rec = EpochRecord(epoch, *map(float, sums), time.perf_counter() - t0)
        hist.records.append(rec)
        log.info("epoch %d mse=%.3e kde=%.3e moment=%.3e total=%.3e", epoch, *sums)
        if callback is not None:
            if ema is not None:
                model.set_params(ema)
            callback(epoch, rec, model)
            model.set_params(theta)
        if cfg.patience is not None:
            if rec.total < best:
                best, stale = rec.total, 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
    if ema is not None:
        model.set_params(ema)
    hist.checksum = model.checksum()
    return model, hist


def evaluate_mse(model, store, n=None, seed=0):
    """Reconstruction MSE of ``decode(x0, encode(x0, x1))`` over the store (or a random subset)."""
    idx = np.arange(len(store))
    if n is not None and n < len(store):
        idx = np.sort(np.random.default_rng(seed).choice(len(store), n, replace=False))
    x0, x1 = store.x0[idx], store.x1[idx]
    pred = model.decode(x0, model.encode(x0, x1))
    return float(np.mean(np.sum((pred - x1) ** 2, axis=1)))


@dataclass
class SweepReport:
    rows: list
    detected_dim: int
    drop_ratio: float
    drop_observed: bool
    boundary_ratio: float | None = None

    def as_dict(self):
        return {
            "rows": [{"nz": nz, "mse": mse} for nz, mse in self.rows],
            "detected_dim": self.detected_dim,
            "drop_ratio": self.drop_ratio,
            "drop_observed": self.drop_observed,
            "boundary_ratio": self.boundary_ratio,
        }

    def to_json(self, path):
        with open(path, "w") as f:
            json.dump(self.as_dict(), f, indent=2)


def detect_dimension(mses, drop_ratio=10.0):
    """Smallest latent size after which no later size improves MSE by ``drop_ratio`` or more.

    ``mses[i]`` is the MSE at ``n_z = i + 1``. Returns
    ``(detected_dim, drop_observed, boundary_ratio)``.
    """
    mses = np.asarray(mses, dtype=np.float64)
    k = mses.size
    detected = k
    for i in range(k):
        if all(mses[i] / mses[j] < drop_ratio for j in range(i + 1, k)):
            detected = i + 1
            break
    dropped = any(mses[i] / mses[j] >= drop_ratio for i in range(k) for j in range(i + 1, k))
    boundary = float(mses[detected - 2] / mses[detected - 1]) if detected > 1 else None
    return detected, dropped, boundary


def sweep_latent_dim(store, base_cfg, max_nz, drop_ratio=10.0, on_model=None):
    """Train one model per ``n_z`` in ``1..max_nz`` and locate the MSE plateau.

    The MSE used per ``n_z`` is the reconstruction error of the final model
    over the whole store. ``on_model(nz, model, history)`` sees every trained
    model (e.g. to checkpoint it).
    """
    if max_nz < 1:
        raise ValueError("max_nz must be >= 1")
    rows = []
    for nz in range(1, max_nz + 1):
        cfg = dataclasses.replace(base_cfg, latent_dim=nz)
        model, hist = train(store, cfg)
        mse = evaluate_mse(model, store)
        log.info("sweep n_z=%d mse=%.3e", nz, mse)
        rows.append((nz, mse))
        if on_model is not None:
            on_model(nz, model, hist)
    detected, dropped, boundary = detect_dimension([m for _, m in rows], drop_ratio)
    return SweepReport(rows, detected, drop_ratio, dropped, boundary)

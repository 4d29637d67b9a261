"""Comparison of learned models against the true SDE.

Anything with ``dim``, ``latent_dim``, ``dt``, ``decode(x, z)`` and
``sample_latent(rng, n)`` can be rolled out: a trained
:class:`~sfml.neural.FmlModel` or an :class:`~sfml.sde.SdeStepper`
wrapping the true dynamics.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from sfml.sde import SdeStepper

ARITHMETIC = "arithmetic"
GEOMETRIC = "geometric"
MAX_EXCLUDED_FRACTION = 0.01


class EnsembleDivergenceError(RuntimeError):
    pass


@dataclass
class EnsembleStats:
    times: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    n_samples: int
    excluded: int = 0
    paths: np.ndarray | None = field(default=None, repr=False)

    @property
    def terminal_mean(self):
        return self.mean[-1]

    @property
    def terminal_std(self):
        return self.std[-1]

    def to_csv(self, path):
        d = self.mean.shape[1]
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "time"] + [f"mean_{k + 1}" for k in range(d)] + [f"std_{k + 1}" for k in range(d)])
            for n, t in enumerate(self.times):
                w.writerow([n, repr(float(t))] + [repr(float(v)) for v in self.mean[n]] + [repr(float(v)) for v in self.std[n]])


def _as_point(x, dim):
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.shape != (dim,):
        raise ValueError(f"initial state has length {x.size}, expected {dim}")
    return x


def _run(stepper, x0, n_samples, n_steps, seed, keep_paths, drop=None):
    rng = np.random.default_rng(seed)
    d = stepper.dim
    x = np.tile(x0, (n_samples, 1))
    alive = np.ones(n_samples, dtype=bool)
    use = alive if drop is None else ~drop
    mean = np.empty((n_steps + 1, d))
    std = np.empty((n_steps + 1, d))
    paths = np.empty((n_steps + 1, n_samples, d)) if keep_paths else None

    def record(n):
        sel = x[use]
        mean[n] = sel.mean(axis=0)
        # exact zero for a collapsed ensemble instead of rounding residue
        std[n] = np.where(np.ptp(sel, axis=0) == 0, 0.0, sel.std(axis=0))
        if keep_paths:
            paths[n] = x

    record(0)
    for n in range(1, n_steps + 1):
        z = stepper.sample_latent(rng, n_samples)
        with np.errstate(all="ignore"):
            x = stepper.decode(x, z)
        bad = ~np.all(np.isfinite(x), axis=1)
        if bad.any():
            alive &= ~bad
            if drop is None:
                return None, ~alive
        record(n)
    return (mean, std, paths), ~alive


def rollout_ensemble(model, x0, n_samples, n_steps, seed=0, keep_paths=False):
    """Iterate ``x <- decode(x, z)`` with fresh latent draws for every sample and step.

    Paths that go non-finite are dropped from the statistics of every step;
    dropping more than 1% of the ensemble raises
    :class:`EnsembleDivergenceError`.
    """
    if n_samples < 1 or n_steps < 1:
        raise ValueError("n_samples and n_steps must be >= 1")
    x0 = _as_point(x0, model.dim)
    out, diverged = _run(model, x0, n_samples, n_steps, seed, keep_paths)
    n_bad = int(diverged.sum())
    if out is None:
        if n_bad > MAX_EXCLUDED_FRACTION * n_samples:
            raise EnsembleDivergenceError(f"{n_bad} of {n_samples} paths diverged (limit 1%)")
        # the first pass stops at the first blow-up; rerun the same draws
        # to find every diverging path, then once more excluding them
        out, diverged = _run(model, x0, n_samples, n_steps, seed, keep_paths, drop=np.zeros(n_samples, bool))
        n_bad = int(diverged.sum())
        if n_bad > MAX_EXCLUDED_FRACTION * n_samples:
            raise EnsembleDivergenceError(f"{n_bad} of {n_samples} paths diverged (limit 1%)")
        out, _ = _run(model, x0, n_samples, n_steps, seed, keep_paths, drop=diverged)
    mean, std, paths = out
    times = model.dt * np.arange(n_steps + 1)
    return EnsembleStats(times, mean, std, n_samples, n_bad, paths)


def reference_stats(spec, x0, n_samples, n_steps, dt, seed=0, keep_paths=False):
    """Ensemble statistics of the true SDE through the same rollout machinery."""
    return rollout_ensemble(SdeStepper(spec, dt), x0, n_samples, n_steps, seed, keep_paths)


@dataclass
class DriftDiffTable:
    x_points: np.ndarray
    a_hat: np.ndarray
    b_hat: np.ndarray
    mode: str
    n_mc: int
    step_std: np.ndarray | None = None

    @property
    def convention(self):
        if self.mode == ARITHMETIC:
            return "a_hat = E_z[D(x,z) - x] / dt; b_hat = Std_z[D(x,z)] / sqrt(dt); step_std = Std_z[D(x,z)]"
        return "a_hat = ln(E_z[D(x,z) / x]) / dt; b_hat = Std_z[D(x,z)]"

    def to_csv(self, path):
        d = self.x_points.shape[1]
        head = [f"x_{k + 1}" for k in range(d)] + [f"a_hat_{k + 1}" for k in range(d)] + [f"b_hat_{k + 1}" for k in range(d)]
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(head)
            for x, a, b in zip(self.x_points, self.a_hat, self.b_hat):
                w.writerow([repr(float(v)) for v in (*x, *a, *b)])


def recover_drift_diffusion(model, x_points, n_mc, mode=ARITHMETIC, seed=0):
    """Effective drift and diffusion of the one-step map at each point.

    The same latent draws are reused at every point, so the curves are
    smooth in ``x``.
    """
    if n_mc < 2:
        raise ValueError("n_mc must be >= 2")
    if mode not in (ARITHMETIC, GEOMETRIC):
        raise ValueError(f"unknown mode {mode!r}")
    pts = np.asarray(x_points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    if pts.shape[1] != model.dim:
        raise ValueError(f"grid points have dimension {pts.shape[1]}, expected {model.dim}")
    if model.dim == 1 and np.any(np.diff(pts[:, 0]) <= 0):
        raise ValueError("grid must be strictly increasing")
    if mode == GEOMETRIC and np.any(np.abs(pts) < 1e-9):
        raise ValueError("geometric mode needs every grid coordinate away from 0")

    z = model.sample_latent(np.random.default_rng(seed), n_mc)
    dt = model.dt
    a_hat = np.empty_like(pts)
    b_hat = np.empty_like(pts)
    step_std = np.empty_like(pts)
    for i, x in enumerate(pts):
        y = model.decode(np.tile(x, (n_mc, 1)), z)
        sd = y.std(axis=0, ddof=1)
        step_std[i] = sd
        if mode == ARITHMETIC:
            a_hat[i] = (y - x).mean(axis=0) / dt
            b_hat[i] = sd / math.sqrt(dt)
        else:
            a_hat[i] = np.log((y / x).mean(axis=0)) / dt
            b_hat[i] = sd
    return DriftDiffTable(pts, a_hat, b_hat, mode, n_mc, step_std)


def conditional_samples(model, x, n_mc, seed=0):
    """``n_mc`` draws from the learned one-step law ``P(x_{n+1} | x_n = x)``."""
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    x = _as_point(x, model.dim)
    z = model.sample_latent(np.random.default_rng(seed), n_mc)
    return model.decode(np.tile(x, (n_mc, 1)), z)


def deterministic_components(samples, dt, factor=0.05):
    """Mask of coordinates whose one-step spread is below ``factor * sqrt(dt)``."""
    return np.asarray(samples).std(axis=0) < factor * math.sqrt(dt)


def normal_cdf(x):
    return 0.5 * (1.0 + erf(np.asarray(x) / math.sqrt(2.0)))


def ks_statistic(samples):
    """One-sample Kolmogorov-Smirnov distance to the standard normal."""
    x = np.sort(np.asarray(samples, dtype=np.float64).reshape(-1))
    n = x.size
    if n < 2:
        raise ValueError("need at least 2 samples")
    cdf = normal_cdf(x)
    upper = np.arange(1, n + 1) / n - cdf
    lower = cdf - np.arange(n) / n
    return float(max(upper.max(), lower.max()))


def silverman_bandwidth(samples):
    x = np.asarray(samples, dtype=np.float64).reshape(-1)
    sd = x.std(ddof=1) if x.size > 1 else 0.0
    return 1.06 * sd * x.size ** (-0.2) if sd > 0 else 1.0


def empirical_pdf(samples, grid, bandwidth=None):
    """Gaussian-kernel density estimate of 1-D ``samples`` evaluated on ``grid``."""
    x = np.asarray(samples, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise ValueError("no samples")
    g = np.asarray(grid, dtype=np.float64)
    if np.any(np.diff(g) <= 0):
        raise ValueError("grid must be increasing")
    h = silverman_bandwidth(x) if bandwidth is None else float(bandwidth)
    out = np.zeros_like(g)
    # chunked to bound memory on large ensembles
    for lo in range(0, x.size, 4096):
        u = (g[:, None] - x[None, lo : lo + 4096]) / h
        out += np.exp(-0.5 * u * u).sum(axis=1)
    return out / (x.size * h * math.sqrt(2 * math.pi))


def local_maxima(grid, values):
    """Grid locations of strict interior local maxima."""
    v = np.asarray(values)
    i = np.flatnonzero((v[1:-1] > v[:-2]) & (v[1:-1] > v[2:])) + 1
    return np.asarray(grid)[i]


def histogram2d(samples, bins=40):
    """Joint histogram of the first two coordinates, as density with bin edges."""
    s = np.asarray(samples)
    h, ex, ey = np.histogram2d(s[:, 0], s[:, 1], bins=bins, density=True)
    return h, ex, ey

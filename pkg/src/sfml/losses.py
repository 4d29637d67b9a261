"""Training objective: reconstruction MSE plus a distributional loss on z.

Every kernel has a ``*_and_grad`` twin returning ``(value, dvalue/dinput)``
so the trainer can chain it through the encoder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np

MOMENT_SCALES = (1.0, 1.0, 2.0, 3.0, 8.0, 15.0)
GAUSSIAN_MOMENTS = (0.0, 1.0, 0.0, 3.0, 0.0, 15.0)
SQRT_EPS = 1e-12


@dataclass(frozen=True)
class LossWeights:
    """Weights of the composite loss.

    ``bandwidth=None`` selects ``N ** (-1 / (n_z + 4))`` per batch.
    ``squared`` switches the KDE term from the L2 norm to its square.
    """

    lam: float = 1.0
    tau: float = 1.0
    nu: float = 0.1
    bandwidth: float | None = None
    c: tuple = field(default=MOMENT_SCALES)
    squared: bool = False

    def __post_init__(self):
        if self.lam <= 0 or self.tau <= 0 or self.nu <= 0:
            raise ValueError("lam, tau and nu must be strictly positive")
        if self.bandwidth is not None and self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")
        if len(self.c) != 6 or min(self.c) <= 0:
            raise ValueError("c must hold six positive moment scalings")

    def bandwidth_for(self, n, n_z):
        return self.bandwidth if self.bandwidth is not None else default_bandwidth(n, n_z)

    def as_dict(self):
        return {
            "lam": self.lam,
            "tau": self.tau,
            "nu": self.nu,
            "bandwidth": self.bandwidth,
            "c": list(self.c),
            "squared": self.squared,
        }


def default_bandwidth(n, n_z):
    return float(n) ** (-1.0 / (n_z + 4))


def _check_2d(a, what):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2 or a.shape[0] < 1:
        raise ValueError(f"{what} must be a non-empty (N, k) array, got shape {a.shape}")
    return a


def mse_loss(pred, target):
    return mse_loss_and_grad(pred, target)[0]


def mse_loss_and_grad(pred, target):
    pred = _check_2d(pred, "pred")
    target = _check_2d(target, "target")
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    diff = pred - target
    n = pred.shape[0]
    return float(np.sum(diff * diff) / n), 2.0 * diff / n


# KDE L2 distance to the standard normal, closed form.
#
# With G(v; s) the centred isotropic Gaussian density of variance s:
#   ||f_B - f_N||^2 = 1/N^2 sum_ij G(z_i - z_j; 2h^2)
#                     - 2/N sum_i G(z_i; 1 + h^2) + (4 pi)^(-n/2)


@numba.njit(cache=True)
def _pair_sum(z, s):
    """sum_ij exp(-|z_i - z_j|^2 / (2 s)) and its gradient w.r.t. z."""
    n, k = z.shape
    grad = np.zeros((n, k))
    rows = np.zeros(n)
    inv = 1.0 / s
    half = 0.5 * inv
    for i in range(n):
        acc = 0.0
        for j in range(i + 1, n):
            r = 0.0
            for a in range(k):
                t = z[i, a] - z[j, a]
                r += t * t
            e = math.exp(-r * half)
            acc += e
            for a in range(k):
                g = e * (z[i, a] - z[j, a]) * inv
                grad[i, a] -= g
                grad[j, a] += g
        rows[i] = acc
    total = 0.0
    for i in range(n):
        total += rows[i]
    # ordered pairs i != j plus the diagonal
    return 2.0 * total + n, 2.0 * grad


def kde_l2_squared_and_grad(z, h):
    z = _check_2d(z, "batch")
    if not h > 0:
        raise ValueError(f"bandwidth must be positive, got {h}")
    n, k = z.shape
    s_pair = 2.0 * h * h
    s_cross = 1.0 + h * h
    c_pair = (2 * math.pi * s_pair) ** (-k / 2)
    c_cross = (2 * math.pi * s_cross) ** (-k / 2)

    pair, gpair = _pair_sum(np.ascontiguousarray(z), s_pair)
    ex = np.exp(-np.sum(z * z, axis=1) / (2 * s_cross))
    cross = ex.sum()
    value = c_pair * pair / n**2 - 2.0 * c_cross * cross / n + (4 * math.pi) ** (-k / 2)
    grad = c_pair * gpair / n**2 + (2.0 * c_cross / n) * ex[:, None] * z / s_cross
    return float(value), grad


def kde_l2_distance_and_grad(z, h, squared=False):
    sq, g = kde_l2_squared_and_grad(z, h)
    if squared:
        return sq, g
    sq = max(sq, 0.0)
    root = math.sqrt(sq)
    denom = 2.0 * (root if sq >= SQRT_EPS else math.sqrt(sq + SQRT_EPS))
    return root, g / denom


def kde_l2_distance(z, h, squared=False):
    """L2 distance between the Gaussian-kernel KDE of ``z`` and N(0, I).

    ``h`` is the kernel standard deviation. Exact: the integrals of
    products of Gaussians are evaluated in closed form.
    """
    return kde_l2_distance_and_grad(z, h, squared)[0]


def _central_moments_and_grads(x):
    """Mean and central moments 2..6 of a 1-D sample with their gradients."""
    n = x.size
    m = x.mean()
    u = x - m
    powers = [np.ones(n), u]
    for _ in range(5):
        powers.append(powers[-1] * u)
    mom = [m] + [powers[j].mean() for j in range(2, 7)]
    grads = [np.full(n, 1.0 / n)]
    for j in range(2, 7):
        below = powers[j - 1].mean()
        grads.append(j * (powers[j - 1] - below) / n)
    return np.array(mom), grads


def _marginal_terms(z, c):
    n, k = z.shape
    value = 0.0
    grad = np.zeros_like(z)
    for a in range(k):
        mom, grads = _central_moments_and_grads(z[:, a])
        for j in range(6):
            diff = mom[j] - GAUSSIAN_MOMENTS[j]
            value += diff * diff / c[j]
            grad[:, a] += 2.0 * diff / c[j] * grads[j]
    return value, grad


def moment_loss_1d_and_grad(z, c=MOMENT_SCALES):
    z = _check_2d(z, "batch")
    if z.shape[1] != 1:
        raise ValueError("moment_loss_1d expects a single column")
    if z.shape[0] < 2:
        raise ValueError("moment loss needs at least 2 samples")
    return _marginal_terms(z, c)


def moment_loss_1d(z, c=MOMENT_SCALES):
    """Weighted squared error of the batch mean and central moments 2..6 against N(0, 1)."""
    return moment_loss_1d_and_grad(z, c)[0]


def moment_loss_nd_and_grad(z, nu=0.1, c=MOMENT_SCALES):
    z = _check_2d(z, "batch")
    n, k = z.shape
    if n < 2:
        raise ValueError("moment loss needs at least 2 samples")
    if k == 1:
        return moment_loss_1d_and_grad(z, c)
    value, grad = _marginal_terms(z, c)
    u = z - z.mean(axis=0)
    var = np.mean(u * u, axis=0)
    for a in range(k):
        if not var[a] > 0:
            raise ValueError(f"latent dimension {a} has zero variance; correlation undefined")
    pairs = k * (k - 1) // 2
    w = nu / pairs
    for a in range(k):
        for b in range(a + 1, k):
            sab = math.sqrt(var[a] * var[b])
            rho = np.mean(u[:, a] * u[:, b]) / sab
            value += w * rho * rho
            coef = 2.0 * w * rho / n
            grad[:, a] += coef * (u[:, b] / sab - rho * u[:, a] / var[a])
            grad[:, b] += coef * (u[:, a] / sab - rho * u[:, b] / var[b])
    return float(value), grad


def moment_loss_nd(z, nu=0.1, c=MOMENT_SCALES):
    """Marginal moment loss summed over dimensions plus mean squared pairwise correlation."""
    return moment_loss_nd_and_grad(z, nu, c)[0]


def distributional_loss_and_grad(z, w):
    z = _check_2d(z, "batch")
    n, k = z.shape
    kde, gk = kde_l2_distance_and_grad(z, w.bandwidth_for(n, k), w.squared)
    mom, gm = moment_loss_nd_and_grad(z, w.nu, w.c)
    return kde + w.tau * mom, gk + w.tau * gm, kde, mom


def distributional_loss(z, w):
    """KDE distance plus ``tau`` times the moment loss."""
    return distributional_loss_and_grad(z, w)[0]


def batch_loss_and_grads(z, pred, target, w):
    """``MSE + lam * L_D`` for one batch with gradients w.r.t. ``z`` and ``pred``.

    Returns ``(total, dz, dpred, parts)`` where ``parts`` holds the
    individual ``mse``, ``kde`` and ``moment`` values.
    """
    mse, dpred = mse_loss_and_grad(pred, target)
    dist, dz, kde, mom = distributional_loss_and_grad(z, w)
    total = mse + w.lam * dist
    return total, w.lam * dz, dpred, {"mse": mse, "kde": kde, "moment": mom, "total": total}


def total_loss(batches, w):
    """Mean over batches of ``MSE + lam * L_D``; ``batches`` holds ``(z, pred, target)`` triples."""
    batches = list(batches)
    if not batches:
        raise ValueError("need at least one batch")
    return sum(batch_loss_and_grads(z, p, t, w)[0] for z, p, t in batches) / len(batches)


def make_objective(w):
    """Adapter turning :class:`LossWeights` into a ``loss_fn`` for :func:`sfml.neural.gradients`."""

    def loss_fn(z, pred, target):
        total, dz, dpred, _ = batch_loss_and_grads(z, pred, target, w)
        return total, dz, dpred

    return loss_fn

"""Ground-truth SDE catalog and Euler-Maruyama simulation.

Every SDE is a frozen dataclass so two instances built from the same
parameters compare equal. ``drift`` and ``diffusion`` are vectorised over
leading axes: ``drift(x)`` maps ``(..., d)`` to ``(..., d)`` and
``diffusion(x)`` maps ``(..., d)`` to ``(..., d, m)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from sfml import _io

GAUSSIAN = "gaussian"
EXPONENTIAL = "exponential"
LOGNORMAL = "lognormal"
NOISE_KINDS = (GAUSSIAN, EXPONENTIAL, LOGNORMAL)


class DivergenceError(FloatingPointError):
    """A simulated state became non-finite."""

    def __init__(self, message, value=None, trajectory=None, step=None):
        super().__init__(message)
        self.value = value
        self.trajectory = trajectory
        self.step = step


@dataclass(frozen=True)
class SdeSpec:
    """Time-homogeneous Ito diffusion ``dx = b(x) dt + sigma(x) dW``."""

    name: str
    dim: int
    noise_dim: int
    noise_kind: str = GAUSSIAN

    def __post_init__(self):
        if self.dim < 1 or self.noise_dim < 1:
            raise ValueError("dim and noise_dim must be positive")
        if self.noise_kind not in NOISE_KINDS:
            raise ValueError(f"unknown noise kind {self.noise_kind!r}")

    def drift(self, x):
        raise NotImplementedError

    def diffusion(self, x):
        raise NotImplementedError

    @property
    def multiplicative(self):
        """True when stepping uses an exact multiplicative update instead of Euler."""
        return False


def _col(x):
    return np.asarray(x, dtype=np.float64)


@dataclass(frozen=True)
class OrnsteinUhlenbeck(SdeSpec):
    """``dx = theta (mu - x) dt + sigma dW`` in one dimension."""

    name: str = "ou1d"
    dim: int = 1
    noise_dim: int = 1
    theta: float = 1.0
    mu: float = 1.2
    sigma: float = 0.3

    def drift(self, x):
        return self.theta * (self.mu - _col(x))

    def diffusion(self, x):
        x = _col(x)
        return np.full(x.shape + (1,), self.sigma)


@dataclass(frozen=True)
class GeometricBrownian(SdeSpec):
    name: str = "gbm"
    dim: int = 1
    noise_dim: int = 1
    mu: float = 2.0
    sigma: float = 1.0

    def drift(self, x):
        return self.mu * _col(x)

    def diffusion(self, x):
        return (self.sigma * _col(x))[..., None]


@dataclass(frozen=True)
class NonlinearDiffusion(SdeSpec):
    """``dx = -mu x dt + sigma exp(-x^2) dW``."""

    name: str = "expdiff"
    dim: int = 1
    noise_dim: int = 1
    mu: float = 5.0
    sigma: float = 0.5

    def drift(self, x):
        return -self.mu * _col(x)

    def diffusion(self, x):
        x = _col(x)
        return (self.sigma * np.exp(-x * x))[..., None]


@dataclass(frozen=True)
class Trigonometric(SdeSpec):
    """``dx = sin(2 k pi x) dt + sigma cos(2 k pi x) dW``."""

    name: str = "trig"
    dim: int = 1
    noise_dim: int = 1
    k: float = 1.0
    sigma: float = 0.5

    def drift(self, x):
        return np.sin(2 * self.k * np.pi * _col(x))

    def diffusion(self, x):
        return (self.sigma * np.cos(2 * self.k * np.pi * _col(x)))[..., None]


@dataclass(frozen=True)
class DoubleWell(SdeSpec):
    """``dx = (x - x^3) dt + sigma dW``; stable states at +-1."""

    name: str = "doublewell"
    dim: int = 1
    noise_dim: int = 1
    sigma: float = 0.5

    def drift(self, x):
        x = _col(x)
        return x - x**3

    def diffusion(self, x):
        x = _col(x)
        return np.full(x.shape + (1,), self.sigma)


@dataclass(frozen=True)
class ExponentialNoise(SdeSpec):
    """``dx = mu x dt + sigma sqrt(dt) eta`` with ``eta ~ Exp(1)``.

    The noise has non-zero mean, so the effective one-step drift is
    ``mu x + sigma / sqrt(dt)``.
    """

    name: str = "expnoise"
    dim: int = 1
    noise_dim: int = 1
    noise_kind: str = EXPONENTIAL
    mu: float = -2.0
    sigma: float = 0.1

    def drift(self, x):
        return self.mu * _col(x)

    def diffusion(self, x):
        x = _col(x)
        return np.full(x.shape + (1,), self.sigma)

    def effective_drift(self, x, dt):
        return self.mu * _col(x) + self.sigma / math.sqrt(dt)


@dataclass(frozen=True)
class LognormalOU(SdeSpec):
    """``d log x = (log m - theta log x) dt + sigma dW``.

    Stepped with ``x' = m^dt x^(1 - theta dt) eta^(sigma sqrt(dt))``,
    ``eta ~ Lognormal(0, 1)``. ``drift``/``diffusion`` give the equivalent
    Ito coefficients for ``x`` itself.
    """

    name: str = "lognormal"
    dim: int = 1
    noise_dim: int = 1
    noise_kind: str = LOGNORMAL
    m: float = 1.0 / math.sqrt(math.e)
    theta: float = 1.0
    sigma: float = 0.3

    @property
    def multiplicative(self):
        return True

    def drift(self, x):
        x = _col(x)
        return x * (math.log(self.m) - self.theta * np.log(x) + 0.5 * self.sigma**2)

    def diffusion(self, x):
        return (self.sigma * _col(x))[..., None]

    def multiplicative_step(self, x, eta, dt):
        return self.m**dt * x ** (1.0 - self.theta * dt) * eta ** (self.sigma * math.sqrt(dt))

    def conditional_log_mean_rate(self, x, dt):
        """ln[(E[x'/x])^(1/dt)] = ln(m x^-theta) + sigma^2 / 2."""
        return np.log(self.m * _col(x) ** (-self.theta)) + 0.5 * self.sigma**2

    def conditional_std(self, x, dt):
        """Std(x' | x) as a closed form of the multiplicative step."""
        x = _col(x)
        return (
            math.sqrt(math.exp(self.sigma**2 * dt) - 1.0)
            * (self.m * math.exp(self.sigma**2 / 2)) ** dt
            * (1.0 - self.theta * dt)
            * x
        )


@dataclass(frozen=True)
class LinearOU(SdeSpec):
    """``dx = B x dt + Sigma dW`` with constant matrices (stored as tuples)."""

    B: tuple = ()
    Sigma: tuple = ()

    def __post_init__(self):
        super().__post_init__()
        if np.shape(self.B) != (self.dim, self.dim):
            raise ValueError("B must be dim x dim")
        if np.shape(self.Sigma) != (self.dim, self.noise_dim):
            raise ValueError("Sigma must be dim x noise_dim")

    def drift(self, x):
        return _col(x) @ np.asarray(self.B).T

    def diffusion(self, x):
        x = _col(x)
        return np.broadcast_to(np.asarray(self.Sigma, dtype=np.float64), x.shape + (self.noise_dim,)).copy()


@dataclass(frozen=True)
class CustomSde(SdeSpec):
    """User-supplied drift and diffusion callables."""

    drift_fn: Callable = field(default=None, compare=True)
    diffusion_fn: Callable = field(default=None, compare=True)

    def drift(self, x):
        return np.asarray(self.drift_fn(_col(x)), dtype=np.float64)

    def diffusion(self, x):
        return np.asarray(self.diffusion_fn(_col(x)), dtype=np.float64)


def _tup(a):
    return tuple(tuple(float(v) for v in row) for row in a)


OU2D_B = ((-1.0, -0.5), (-1.0, -1.0))
OU2D_SIGMA = ((1.0, 0.0), (0.0, 0.5))

OU5D_B = (
    (0.2, 1.0, 0.2, 0.4, 0.2),
    (-1.0, 0.0, 0.2, 0.8, -1.0),
    (0.2, 0.2, -0.8, -1.2, 0.2),
    (-0.6, 0.0, 1.2, -0.2, 0.6),
    (0.2, 0.2, 0.6, 0.4, 0.0),
)
OU5D_SIGMAS = {
    1: _tup(np.diag([0, 0, 1, 0, 0])),
    2: _tup(np.diag([0, 0.8, 0, 0, -0.8])),
    3: (
        (0.8, 0.2, 0, 0, 0),
        (-0.4, 0.6, 0, 0, 0),
        (0, 0, 0, 0, 0),
        (0, 0, 0, 0.7, 0),
        (0, 0, 0, 0, 0),
    ),
    4: (
        (0.7, 0, -0.4, 0, 0),
        (0, 0, 0, 0, 0),
        (0.1, 0, 0.6, 0.2, -0.1),
        (0, 0, 0.1, -0.6, 0.2),
        (0, 0, 0, 0.3, 0.8),
    ),
    5: (
        (0.8, 0.2, 0.1, -0.3, 0.1),
        (-0.3, 0.6, 0.1, 0, -0.1),
        (0.2, -0.1, 0.9, 0.1, 0.2),
        (0.1, 0.1, -0.2, 0.7, 0),
        (-0.1, 0.1, 0.1, -0.1, 0.5),
    ),
}


@dataclass(frozen=True)
class Benchmark:
    """An SDE plus the training box and evaluation start point used with it."""

    spec: SdeSpec
    init_low: tuple
    init_high: tuple
    x0: tuple
    horizon: float


def _build_catalog():
    cat = {
        "ou1d": Benchmark(OrnsteinUhlenbeck(), (0.0,), (2.5,), (1.5,), 5.0),
        "gbm": Benchmark(GeometricBrownian(), (0.0,), (2.0,), (0.5,), 1.0),
        "expdiff": Benchmark(NonlinearDiffusion(), (-1.0,), (1.0,), (-0.4,), 5.0),
        "trig": Benchmark(Trigonometric(), (0.35,), (0.7,), (0.6,), 10.0),
        "doublewell": Benchmark(DoubleWell(), (-2.5,), (2.5,), (1.5,), 500.0),
        "expnoise": Benchmark(ExponentialNoise(), (0.2,), (0.9,), (0.34,), 5.0),
        "lognormal": Benchmark(LognormalOU(), (0.2,), (0.9,), (1.5,), 5.0),
        "ou2d": Benchmark(
            LinearOU(name="ou2d", dim=2, noise_dim=2, B=OU2D_B, Sigma=OU2D_SIGMA),
            (-4.0, -3.0),
            (4.0, 3.0),
            (0.3, 0.4),
            5.0,
        ),
        "ou2d_rank1": Benchmark(
            LinearOU(name="ou2d_rank1", dim=2, noise_dim=2, B=OU2D_B, Sigma=((1.0, 0.0), (0.0, 0.0))),
            (-4.0, -3.0),
            (4.0, 3.0),
            (0.3, 0.4),
            5.0,
        ),
    }
    for k, sig in OU5D_SIGMAS.items():
        name = f"ou5d_k{k}"
        cat[name] = Benchmark(
            LinearOU(name=name, dim=5, noise_dim=5, B=OU5D_B, Sigma=sig),
            (-4.0,) * 5,
            (4.0,) * 5,
            (0.3, -0.2, -1.7, 2.5, 1.4),
            5.0,
        )
    return cat


_CATALOG = _build_catalog()


def benchmark_catalog():
    """Return ``{name: Benchmark}`` for every built-in SDE."""
    return dict(_CATALOG)


def get_benchmark(name):
    try:
        return _CATALOG[name]
    except KeyError:
        raise KeyError(f"unknown SDE {name!r}; known: {', '.join(sorted(_CATALOG))}") from None


def get_spec(name):
    return get_benchmark(name).spec


def sample_noise(kind, n, rng):
    """Draw ``n`` unit noise values of the given kind from ``rng``."""
    if kind == GAUSSIAN:
        return rng.standard_normal(n)
    if kind == EXPONENTIAL:
        return rng.standard_exponential(n)
    if kind == LOGNORMAL:
        return rng.lognormal(0.0, 1.0, n)
    raise ValueError(f"unknown noise kind {kind!r}")


def scale_noise(spec, raw, dt):
    """Turn unit draws into the ``noise`` argument of :func:`euler_maruyama_step`.

    Gaussian and exponential draws get the ``sqrt(dt)`` factor here; lognormal
    draws pass through since the multiplicative update owns its exponent.
    """
    if spec.multiplicative:
        return raw
    return raw * math.sqrt(dt)


def euler_maruyama_step(spec, x, dt, noise):
    """Advance ``x`` by one step of size ``dt``.

    ``x`` has shape ``(d,)`` or ``(n, d)``; ``noise`` has the matching
    ``(m,)`` or ``(n, m)`` shape and already carries the ``sqrt(dt)``
    scaling (see :func:`scale_noise`).
    """
    x = np.asarray(x, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if dt <= 0:
        raise ValueError("dt must be positive")
    if x.shape[-1] != spec.dim:
        raise ValueError(f"state has length {x.shape[-1]}, expected {spec.dim}")
    if noise.shape[-1] != spec.noise_dim or noise.shape[:-1] != x.shape[:-1]:
        raise ValueError(f"noise shape {noise.shape} does not match state shape {x.shape}")
    if spec.multiplicative:
        out = spec.multiplicative_step(x, noise, dt)
    else:
        sig = spec.diffusion(x)
        out = x + spec.drift(x) * dt + np.einsum("...ij,...j->...i", sig, noise)
    if not np.all(np.isfinite(out)):
        bad = out[~np.isfinite(out)].flat[0]
        raise DivergenceError(f"non-finite state {bad!r} after Euler-Maruyama step", value=bad)
    return out


@dataclass
class TrajectoryDataset:
    """``states[i, n]`` is the state of trajectory ``i`` after ``n`` steps."""

    states: np.ndarray
    dt: float
    seed: int = 0

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        if self.states.ndim != 3:
            raise ValueError("states must have shape (n_traj, len + 1, dim)")

    @property
    def n_traj(self):
        return self.states.shape[0]

    @property
    def len(self):
        return self.states.shape[1] - 1

    @property
    def dim(self):
        return self.states.shape[2]

    def save(self, path):
        _io.write_container(path, _io.TRAJ, self.n_traj, self.len, self.dim, self.dt, self.seed, self.states)

    @classmethod
    def load(cls, path):
        rec = _io.read_container(path)
        if rec.kind != _io.TRAJ:
            raise ValueError(f"{path} holds {rec.kind!r} records, not trajectories")
        return cls(rec.payload.reshape(rec.n_traj, rec.length + 1, rec.dim), rec.dt, rec.seed)

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["traj_id", "step"] + [f"x_{k + 1}" for k in range(self.dim)])
            for i in range(self.n_traj):
                for n in range(self.len + 1):
                    w.writerow([i, n] + [repr(float(v)) for v in self.states[i, n]])


def _trajectory_streams(seed, n):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def simulate_trajectories(spec, init_low, init_high, n_traj, length, dt, seed=0):
    """Simulate ``n_traj`` trajectories of ``length`` steps from a uniform box.

    Each trajectory owns an independent stream spawned from ``seed``, used
    first for its initial state and then for its ``length`` noise draws, so
    results do not depend on how trajectories are batched.
    """
    lo = np.asarray(init_low, dtype=np.float64).reshape(-1)
    hi = np.asarray(init_high, dtype=np.float64).reshape(-1)
    if lo.shape != (spec.dim,) or hi.shape != (spec.dim,):
        raise ValueError("init box must have length spec.dim")
    if not np.all(lo < hi):
        raise ValueError("init_low must be < init_high componentwise")
    if n_traj < 1 or length < 1:
        raise ValueError("n_traj and length must be >= 1")

    streams = _trajectory_streams(seed, n_traj)
    x0 = np.empty((n_traj, spec.dim))
    raw = np.empty((n_traj, length, spec.noise_dim))
    for i, rng in enumerate(streams):
        x0[i] = rng.uniform(lo, hi)
        raw[i] = sample_noise(spec.noise_kind, length * spec.noise_dim, rng).reshape(length, spec.noise_dim)
    noise = scale_noise(spec, raw, dt)

    states = np.empty((n_traj, length + 1, spec.dim))
    states[:, 0] = x0
    with np.errstate(all="ignore"):
        for n in range(length):
            try:
                states[:, n + 1] = euler_maruyama_step(spec, states[:, n], dt, noise[:, n])
            except DivergenceError:
                nxt = _unguarded_step(spec, states[:, n], dt, noise[:, n])
                i = int(np.argmax(~np.all(np.isfinite(nxt), axis=1)))
                raise DivergenceError(
                    f"trajectory {i} diverged at step {n + 1}: {nxt[i]}",
                    value=nxt[i],
                    trajectory=i,
                    step=n + 1,
                ) from None
    return TrajectoryDataset(states, float(dt), int(seed))


def _unguarded_step(spec, x, dt, noise):
    if spec.multiplicative:
        return spec.multiplicative_step(x, noise, dt)
    return x + spec.drift(x) * dt + np.einsum("...ij,...j->...i", spec.diffusion(x), noise)


class SdeStepper:
    """Adapter exposing a true SDE through the same ``decode`` surface as a model.

    ``decode(x, z)`` takes *unit* noise draws ``z`` (Gaussian, exponential or
    lognormal depending on the SDE) and returns one Euler-Maruyama step.
    """

    def __init__(self, spec, dt):
        self.spec = spec
        self.dt = float(dt)
        self.dim = spec.dim
        self.latent_dim = spec.noise_dim

    def sample_latent(self, rng, n):
        return sample_noise(self.spec.noise_kind, n * self.latent_dim, rng).reshape(n, self.latent_dim)

    def decode(self, x, z):
        x = np.asarray(x, dtype=np.float64)
        z = np.asarray(z, dtype=np.float64)
        with np.errstate(all="ignore"):
            return _unguarded_step(self.spec, x, self.dt, scale_noise(self.spec, z, self.dt))

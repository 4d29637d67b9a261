"""Encoder/decoder networks with hand-written reverse-mode gradients.

Both networks are plain fully connected stacks: eLU on every hidden layer
and a linear output layer. Parameters of each network live in one flat
float64 vector; the per-layer weight and bias arrays are views into it, so
optimizers and checkpoints only ever deal with a single array.
"""

from __future__ import annotations

import hashlib
import json
import struct
import warnings
from dataclasses import dataclass

import numpy as np

ENCODER_HIDDEN = (20, 20, 20)
DECODER_HIDDEN = (20, 20, 20)
_CKPT_MAGIC = b"SFMLCKPT"


class NonFiniteError(FloatingPointError):
    """A loss, gradient or parameter update was not finite."""


def elu(x):
    return np.where(x >= 0, x, np.expm1(np.minimum(x, 0.0)))


def elu_grad(x):
    return np.where(x >= 0, 1.0, np.exp(np.minimum(x, 0.0)))


class Mlp:
    """Dense network ``sizes[0] -> ... -> sizes[-1]``; eLU between layers, linear output."""

    def __init__(self, sizes, theta=None):
        self.sizes = tuple(int(s) for s in sizes)
        if len(self.sizes) < 2 or min(self.sizes) < 1:
            raise ValueError(f"invalid layer sizes {sizes}")
        self._shapes = [(a, b) for a, b in zip(self.sizes[:-1], self.sizes[1:])]
        n = self.count_params(self.sizes)
        self.theta = np.zeros(n) if theta is None else np.array(theta, dtype=np.float64)
        if self.theta.shape != (n,):
            raise ValueError(f"expected {n} parameters, got {self.theta.shape}")
        self._bind()

    @staticmethod
    def count_params(sizes):
        return sum((a + 1) * b for a, b in zip(sizes[:-1], sizes[1:]))

    def _bind(self):
        self.weights, self.biases = [], []
        off = 0
        for a, b in self._shapes:
            self.weights.append(self.theta[off : off + a * b].reshape(a, b))
            off += a * b
            self.biases.append(self.theta[off : off + b])
            off += b

    def set_params(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != self.theta.shape:
            raise ValueError("parameter shape mismatch")
        if not np.all(np.isfinite(theta)):
            raise NonFiniteError("refusing non-finite parameters")
        self.theta[...] = theta

    def init_he_uniform(self, rng, zero_output=False):
        """Fan-in scaled uniform weights, zero biases."""
        for i, W in enumerate(self.weights):
            bound = np.sqrt(6.0 / W.shape[0])
            W[...] = rng.uniform(-bound, bound, size=W.shape)
            self.biases[i][...] = 0.0
        if zero_output:
            self.weights[-1][...] = 0.0
        return self

    def forward(self, x):
        """Return ``(output, cache)``; the cache feeds :meth:`backward`."""
        acts = [x]
        pre = []
        h = x
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            a = h @ W + b
            if i < last:
                pre.append(a)
                h = elu(a)
                acts.append(h)
            else:
                h = a
        return h, (acts, pre)

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache, dout):
        """Gradient w.r.t. the flat parameters and w.r.t. the input."""
        acts, pre = cache
        grad = np.empty_like(self.theta)
        gw, gb = [], []
        off = 0
        for a, b in self._shapes:
            gw.append(grad[off : off + a * b].reshape(a, b))
            off += a * b
            gb.append(grad[off : off + b])
            off += b
        delta = dout
        for i in range(len(self.weights) - 1, -1, -1):
            gw[i][...] = acts[i].T @ delta
            gb[i][...] = delta.sum(axis=0)
            delta = delta @ self.weights[i].T
            if i > 0:
                delta = delta * elu_grad(pre[i - 1])
        return grad, delta


def _as_batch(a, width, what):
    a = np.asarray(a, dtype=np.float64)
    single = a.ndim == 1
    a2 = a[None, :] if single else a
    if a2.ndim != 2 or a2.shape[1] != width:
        raise ValueError(f"{what} has shape {a.shape}, expected (..., {width})")
    return a2, single


class FmlModel:
    """Encoder ``(x0, x1) -> z`` and residual decoder ``(x0, z) -> x0 + r``.

    Both networks see the state through a fixed affine normalization:
    ``u = (x0 - shift) / scale`` and the step ``v = (x1 - x0) / step_scale``.
    The encoder input is ``(u, v)``, the decoder input ``(u, z)`` and the
    residual is ``step_scale * net(u, z)``. The defaults (0, 1, 1) leave
    inputs untouched; :func:`normalization_from_pairs` fits them to data.
    """

    def __init__(
        self,
        dim,
        latent_dim,
        dt,
        encoder_hidden=ENCODER_HIDDEN,
        decoder_hidden=DECODER_HIDDEN,
        shift=None,
        scale=None,
        step_scale=None,
    ):
        self.dim = int(dim)
        self.latent_dim = int(latent_dim)
        self.dt = float(dt)
        self.encoder = Mlp((2 * self.dim, *encoder_hidden, self.latent_dim))
        self.decoder = Mlp((self.dim + self.latent_dim, *decoder_hidden, self.dim))
        self.shift = self._norm_vec(shift, 0.0, "shift")
        self.scale = self._norm_vec(scale, 1.0, "scale")
        self.step_scale = self._norm_vec(step_scale, 1.0, "step_scale")

    def _norm_vec(self, v, default, what):
        v = np.full(self.dim, default) if v is None else np.asarray(v, dtype=np.float64).reshape(-1)
        if v.shape != (self.dim,) or not np.all(np.isfinite(v)):
            raise ValueError(f"{what} must be {self.dim} finite numbers")
        if what != "shift" and np.any(v <= 0):
            raise ValueError(f"{what} must be positive")
        return v

    @classmethod
    def initialized(cls, dim, latent_dim, dt, seed=0, **kw):
        """He-uniform encoder; decoder with a zeroed output layer, i.e. the identity map."""
        model = cls(dim, latent_dim, dt, **kw)
        rng = np.random.default_rng(seed)
        model.encoder.init_he_uniform(rng)
        model.decoder.init_he_uniform(rng, zero_output=True)
        return model

    def _enc_in(self, x0, x1):
        return np.concatenate([(x0 - self.shift) / self.scale, (x1 - x0) / self.step_scale], axis=1)

    def _dec_in(self, x0, z):
        return np.concatenate([(x0 - self.shift) / self.scale, z], axis=1)

    @property
    def n_params(self):
        return self.encoder.theta.size + self.decoder.theta.size

    def get_params(self):
        return np.concatenate([self.encoder.theta, self.decoder.theta])

    def set_params(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {theta.shape}")
        if not np.all(np.isfinite(theta)):
            raise NonFiniteError("refusing non-finite parameters")
        k = self.encoder.theta.size
        self.encoder.set_params(theta[:k])
        self.decoder.set_params(theta[k:])

    def copy(self):
        other = FmlModel(
            self.dim,
            self.latent_dim,
            self.dt,
            self.encoder.sizes[1:-1],
            self.decoder.sizes[1:-1],
            self.shift,
            self.scale,
            self.step_scale,
        )
        other.set_params(self.get_params())
        return other

    def encode(self, x0, x1):
        a, single = _as_batch(x0, self.dim, "x0")
        b, _ = _as_batch(x1, self.dim, "x1")
        if a.shape != b.shape:
            raise ValueError("x0 and x1 batch shapes differ")
        z = self.encoder(self._enc_in(a, b))
        return z[0] if single else z

    def decode(self, x0, z):
        a, single = _as_batch(x0, self.dim, "x0")
        zz, _ = _as_batch(z, self.latent_dim, "z")
        if a.shape[0] != zz.shape[0]:
            raise ValueError("x0 and z batch sizes differ")
        out = a + self.step_scale * self.decoder(self._dec_in(a, zz))
        return out[0] if single else out

    def sample_latent(self, rng, n):
        return rng.standard_normal((n, self.latent_dim))

    def checksum(self):
        return hashlib.sha256(self.get_params().astype("<f8").tobytes()).hexdigest()

    def header(self, extra=None):
        h = {
            "dim": self.dim,
            "latent_dim": self.latent_dim,
            "dt": self.dt,
            "encoder_sizes": list(self.encoder.sizes),
            "decoder_sizes": list(self.decoder.sizes),
            "activation": "elu",
            "residual": True,
            "shift": self.shift.tolist(),
            "scale": self.scale.tolist(),
            "step_scale": self.step_scale.tolist(),
        }
        if extra:
            h.update(extra)
        return h

    def save(self, path, extra=None):
        """Write a JSON header followed by the raw little-endian float64 parameters."""
        head = json.dumps(self.header(extra), sort_keys=True).encode()
        with open(path, "wb") as f:
            f.write(_CKPT_MAGIC)
            f.write(struct.pack("<Q", len(head)))
            f.write(head)
            f.write(self.get_params().astype("<f8").tobytes())

    @classmethod
    def load(cls, path):
        model, _ = cls.load_with_header(path)
        return model

    @classmethod
    def load_with_header(cls, path):
        with open(path, "rb") as f:
            raw = f.read()
        if raw[:8] != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a model checkpoint")
        (n,) = struct.unpack_from("<Q", raw, 8)
        head = json.loads(raw[16 : 16 + n].decode())
        theta = np.frombuffer(raw, dtype="<f8", offset=16 + n).astype(np.float64)
        model = cls(
            head["dim"],
            head["latent_dim"],
            head["dt"],
            tuple(head["encoder_sizes"][1:-1]),
            tuple(head["decoder_sizes"][1:-1]),
            head.get("shift"),
            head.get("scale"),
            head.get("step_scale"),
        )
        model.set_params(theta)
        return model, head


def normalization_from_pairs(x0, x1, floor=1e-12):
    """``(shift, scale, step_scale)``: mean and std of ``x0`` and RMS of ``x1 - x0``.

    Non-finite entries are ignored so that bad data surfaces later as a
    located training error; spreads at or below ``floor`` fall back to 1.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    step = np.asarray(x1, dtype=np.float64) - x0
    x0 = np.where(np.isfinite(x0), x0, np.nan)
    step = np.where(np.isfinite(step), step, np.nan)
    with np.errstate(all="ignore"), warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        shift = np.nan_to_num(np.nanmean(x0, axis=0))
        scale = np.nan_to_num(np.nanstd(x0, axis=0), nan=1.0)
        step_scale = np.nan_to_num(np.sqrt(np.nanmean(step * step, axis=0)), nan=1.0)
    return shift, np.where(scale > floor, scale, 1.0), np.where(step_scale > floor, step_scale, 1.0)


def gradients(model, x0, x1, loss_fn):
    """Loss value and its gradient w.r.t. all encoder and decoder parameters.

    ``loss_fn(z, pred, x1)`` receives the encoder output and the decoded
    prediction for the batch and returns ``(value, dvalue/dz, dvalue/dpred)``.
    The decoder's input gradient is routed back into ``z`` so the encoder
    sees both its direct loss terms and the reconstruction path.

    Returns ``(value, grad, z, pred)`` with ``grad`` laid out like
    :meth:`FmlModel.get_params`.
    """
    d = model.dim
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    z, enc_cache = model.encoder.forward(model._enc_in(x0, x1))
    r, dec_cache = model.decoder.forward(model._dec_in(x0, z))
    pred = x0 + model.step_scale * r
    value, dz, dpred = loss_fn(z, pred, x1)
    if not np.isfinite(value):
        raise NonFiniteError(f"loss is not finite: {value}")
    g_dec, d_in = model.decoder.backward(dec_cache, dpred * model.step_scale)
    g_enc, _ = model.encoder.backward(enc_cache, dz + d_in[:, d:])
    return value, np.concatenate([g_enc, g_dec]), z, pred


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(params, grads, state, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``.

    Non-finite gradients raise :class:`NonFiniteError` and leave both
    ``params`` and ``state`` untouched.
    """
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != params.shape:
        raise ValueError("gradient shape does not match parameters")
    if not np.all(np.isfinite(grads)):
        raise NonFiniteError("non-finite gradient; step skipped")
    b1, b2 = betas
    t = state.t + 1
    m = b1 * state.m + (1 - b1) * grads
    v = b2 * state.v + (1 - b2) * grads * grads
    mhat = m / (1 - b1**t)
    vhat = v / (1 - b2**t)
    new = params - lr * mhat / (np.sqrt(vhat) + eps)
    if not np.all(np.isfinite(new)):
        raise NonFiniteError("Adam update produced non-finite parameters; step skipped")
    return new, AdamState(m, v, t)

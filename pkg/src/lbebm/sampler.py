"""Latent samplers: reparameterized posterior draws and short-run Langevin chains."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import NumericalError


@dataclass
class LangevinConfig:
    steps: int = 20
    step_size: float = 0.08
    noise_on: bool = True

    def __post_init__(self):
        if self.steps < 0 or self.step_size < 0:
            raise ValueError("Langevin steps and step size must be non-negative")


class NoiseStream:
    """Seeded standard-normal source. Same seed, same sequence."""

    def __init__(self, seed=0):
        self.seed = seed
        self._rng = np.random.Generator(np.random.PCG64(seed))

    def normal(self, shape) -> np.ndarray:
        return self._rng.standard_normal(shape)

    def integer_seed(self) -> int:
        return int(self._rng.integers(2**63))

    def spawn(self) -> "NoiseStream":
        child = NoiseStream.__new__(NoiseStream)
        child.seed = None
        child._rng = np.random.Generator(np.random.PCG64(self._rng.integers(2**63)))
        return child


class BlockNoise(NoiseStream):
    """One independent stream per block of rows, for k stacked copies of a batch.

    ``normal(shape)`` splits the leading axis into ``k`` equal blocks and fills
    block j from stream j, so block j never depends on ``k``: the first k draws
    of a k' > k run reproduce a k run exactly.
    """

    def __init__(self, seed, k: int):
        self.seed = seed
        self.k = k
        children = np.random.SeedSequence(seed).spawn(k)
        self._rngs = [np.random.Generator(np.random.PCG64(c)) for c in children]

    def normal(self, shape) -> np.ndarray:
        shape = tuple(np.atleast_1d(shape))
        if shape[0] % self.k:
            raise ValueError(f"leading axis {shape[0]} is not a multiple of {self.k} blocks")
        sub = (shape[0] // self.k,) + shape[1:]
        return np.concatenate([g.standard_normal(sub) for g in self._rngs], axis=0)

    def spawn(self):
        raise TypeError("BlockNoise does not spawn")


class ZeroNoise(NoiseStream):
    """Drop-in stream that always returns zeros."""

    def __init__(self):
        super().__init__(0)

    def normal(self, shape):
        return np.zeros(shape)


def sample_posterior(mu, log_var, noise: NoiseStream, eps=None):
    """z = mu + exp(log_var / 2) * eps. Works on arrays or tape nodes.

    Returns ``(z, eps)`` so callers can replay the same draw.
    """
    mu_v = mu.value if isinstance(mu, nx.Node) else np.asarray(mu)
    if eps is None:
        eps = noise.normal(mu_v.shape)
    if isinstance(mu, nx.Node) or isinstance(log_var, nx.Node):
        tape = nx._tape_of(mu, log_var)
        lv = nx._as_node(tape, log_var)
        z = nx.add(mu, nx.mul(nx.exp(nx.mul(lv, 0.5)), eps))
    else:
        z = mu_v + np.exp(0.5 * np.asarray(log_var)) * eps
    return z, eps


def energy_grad(energy_fn, z: np.ndarray, ctx: np.ndarray, params) -> np.ndarray:
    """d/dz of sum_i C(z_i, ctx_i); parameter grads are left untouched."""
    tape = nx.Tape()
    zn = tape.input(z, requires_grad=True)
    cn = tape.constant(ctx)
    e = energy_fn(zn, cn, params, tape)
    tape.backward(nx.sum_all(e), None)
    return zn.grad if zn.grad is not None else np.zeros_like(z)


def langevin_sample(ctx, params, cfg: LangevinConfig, noise: NoiseStream, energy_fn,
                    latent_dim: int, z0=None) -> np.ndarray:
    """Short-run Langevin chain on exp(-C(z, ctx)) N(z; 0, I), started from N(0, I).

    z <- z + s * (-dC/dz - z) + sqrt(2 s) * eps
    The result is a plain array: no gradient flows back into the chain.
    """
    ctx = np.asarray(ctx, dtype=np.float64)
    n = ctx.shape[0]
    z = noise.normal((n, latent_dim)) if z0 is None else np.array(z0, dtype=np.float64)
    s = cfg.step_size
    if cfg.steps == 0 or s == 0.0:
        return z
    scale = np.sqrt(2.0 * s)
    for k in range(cfg.steps):
        grad = energy_grad(energy_fn, z, ctx, params)
        z = z + s * (-grad - z)
        if cfg.noise_on:
            z = z + scale * noise.normal(z.shape)
        if not np.all(np.isfinite(z)):
            raise NumericalError(f"Langevin chain diverged at step {k + 1}")
    return z

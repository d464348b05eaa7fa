"""The joint model: history encoding, posterior, latent cost, plan and trajectory decoders.

All heads act on per-agent rows. Agents only interact inside ``social_pool``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .dataio import PLAN_INDICES, T_PAST, T_PRED
from .errors import ConfigError, DimensionError
from .pooling import PoolingMask, build_mask, encode_past, identity_mask, init_pooling_params, social_pool
from .sampler import LangevinConfig, NoiseStream, langevin_sample


@dataclass
class ModelConfig:
    latent_dim: int = 16
    hidden: int = 200
    layers: int = 3
    pool_dim: int = 64
    t_past: int = T_PAST
    t_pred: int = T_PRED
    plan_indices: tuple = PLAN_INDICES
    prior: str = "ebm"  # or "gaussian"
    use_plan: bool = True
    social: bool = True

    def __post_init__(self):
        if self.prior not in ("ebm", "gaussian"):
            raise ConfigError(f"unknown prior {self.prior!r}")
        if self.layers < 1:
            raise ConfigError("model.layers must be >= 1")
        self.plan_indices = tuple(int(i) for i in self.plan_indices)

    @property
    def target_indices(self) -> tuple:
        """Future steps (1-based) the latent is inferred from and decoded into."""
        if self.use_plan:
            return self.plan_indices
        return tuple(range(1, self.t_pred + 1))


@dataclass
class GaussianPosterior:
    mu: nx.Node
    log_var: nx.Node


@dataclass
class Context:
    """Per-agent social context rows on a tape."""

    node: nx.Node

    @property
    def values(self) -> np.ndarray:
        return self.node.value


def _hidden(cfg: ModelConfig) -> list[int]:
    return [cfg.hidden] * (cfg.layers - 1)


class LBEBM:
    """Layer naming and wiring for every head; parameters live in a ParamStore."""

    def __init__(self, cfg: ModelConfig | None = None):
        self.cfg = cfg or ModelConfig()

    # ---- parameters -----------------------------------------------------

    def init_params(self, seed: int = 0) -> nx.ParamStore:
        cfg = self.cfg
        rng = np.random.Generator(np.random.PCG64(seed))
        p = nx.ParamStore()
        d, z = cfg.pool_dim, cfg.latent_dim
        n_target = 2 * len(cfg.target_indices)
        init_pooling_params(p, cfg.t_past, cfg.hidden, cfg.layers, d, rng)
        p.init_mlp("plan_enc", [n_target] + _hidden(cfg) + [d], rng)
        trunk = p.init_mlp("infer", [2 * d] + _hidden(cfg), rng)
        width = cfg.hidden if trunk else 2 * d
        p.init_dense("infer.mu", width, z, rng)
        p.init_dense("infer.logvar", width, z, rng)
        if cfg.prior == "ebm":
            p.init_mlp("ebm", [z + d] + _hidden(cfg) + [1], rng)
        else:
            trunk = p.init_mlp("prior", [d] + _hidden(cfg), rng)
            width = cfg.hidden if trunk else d
            p.init_dense("prior.mu", width, z, rng)
            p.init_dense("prior.logvar", width, z, rng)
        p.init_mlp("plan_dec", [z + d] + _hidden(cfg) + [n_target], rng)
        if cfg.use_plan:
            p.init_mlp("traj_dec", [2 * d] + _hidden(cfg) + [2 * cfg.t_pred], rng)
        return p

    def layers(self, prefix: str) -> list[str]:
        n = self.cfg.layers
        if prefix in ("infer", "prior"):
            n -= 1
        return [f"{prefix}.{k}" for k in range(n)]

    def group_names(self, params) -> dict[str, list[str]]:
        """Parameter names by head, for reporting."""
        groups = {}
        for name in params.names():
            groups.setdefault(name.split(".")[0], []).append(name)
        return groups

    # ---- heads ----------------------------------------------------------

    def context(self, past_norm, mask, params, tape) -> Context:
        """E_past followed by masked pooling. Without social pooling the mask is identity."""
        past_norm = np.asarray(past_norm)
        if not self.cfg.social:
            mask = identity_mask(past_norm.shape[0])
        enc = encode_past(past_norm, params, tape)
        return Context(social_pool(enc, mask, params, tape))

    def encode_plan(self, plan, params, tape) -> nx.Node:
        plan = plan if isinstance(plan, nx.Node) else tape.input(np.asarray(plan))
        flat = nx.reshape(plan, (plan.value.shape[0], -1))
        expected = 2 * len(self.cfg.target_indices)
        if flat.value.shape[1] != expected:
            raise DimensionError(f"plan has {flat.value.shape[1]} values per agent, expected {expected}")
        return nx.mlp_forward(flat, self.layers("plan_enc"), params, tape)

    def _ctx_node(self, ctx, tape):
        if isinstance(ctx, Context):
            return ctx.node
        if isinstance(ctx, nx.Node):
            return ctx
        return tape.constant(np.asarray(ctx))

    def infer_posterior(self, plan, ctx, params, tape) -> GaussianPosterior:
        h = nx.concat([self.encode_plan(plan, params, tape), self._ctx_node(ctx, tape)], axis=1)
        h = nx.relu(nx.mlp_forward(h, self.layers("infer"), params, tape)) if self.cfg.layers > 1 else h
        return GaussianPosterior(
            nx.dense(h, "infer.mu", params, tape), nx.dense(h, "infer.logvar", params, tape)
        )

    def gaussian_prior(self, ctx, params, tape) -> GaussianPosterior:
        h = self._ctx_node(ctx, tape)
        if self.cfg.layers > 1:
            h = nx.relu(nx.mlp_forward(h, self.layers("prior"), params, tape))
        return GaussianPosterior(
            nx.dense(h, "prior.mu", params, tape), nx.dense(h, "prior.logvar", params, tape)
        )

    def energy(self, z, ctx, params, tape) -> nx.Node:
        """Per-agent cost C([z_i; ctx_i]) with shape [n]."""
        z = z if isinstance(z, nx.Node) else tape.input(np.asarray(z))
        x = nx.concat([z, self._ctx_node(ctx, tape)], axis=1)
        out = nx.mlp_forward(x, self.layers("ebm"), params, tape)
        return nx.reshape(out, (out.value.shape[0],))

    def decode_plan(self, z, ctx, params, tape) -> nx.Node:
        z = z if isinstance(z, nx.Node) else tape.input(np.asarray(z))
        x = nx.concat([z, self._ctx_node(ctx, tape)], axis=1)
        out = nx.mlp_forward(x, self.layers("plan_dec"), params, tape)
        return nx.reshape(out, (out.value.shape[0], len(self.cfg.target_indices), 2))

    def decode_trajectory(self, plan, ctx, params, tape) -> nx.Node:
        """Full trajectory mean from a plan. In no-plan wiring the plan already is the trajectory."""
        if not self.cfg.use_plan:
            return plan if isinstance(plan, nx.Node) else tape.input(np.asarray(plan))
        x = nx.concat([self.encode_plan(plan, params, tape), self._ctx_node(ctx, tape)], axis=1)
        out = nx.mlp_forward(x, self.layers("traj_dec"), params, tape)
        return nx.reshape(out, (out.value.shape[0], self.cfg.t_pred, 2))

    # ---- sampling -------------------------------------------------------

    def energy_fn(self):
        return lambda z, ctx, params, tape: self.energy(z, ctx, params, tape)

    def sample_prior(self, ctx_values, params, langevin: LangevinConfig, noise: NoiseStream):
        """Draw one latent per context row from the prior (EBM via Langevin, or Gaussian)."""
        if self.cfg.prior == "ebm":
            return langevin_sample(ctx_values, params, langevin, noise, self.energy_fn(),
                                   self.cfg.latent_dim)
        tape = nx.Tape()
        prior = self.gaussian_prior(tape.constant(ctx_values), params, tape)
        eps = noise.normal(prior.mu.value.shape)
        return prior.mu.value + np.exp(0.5 * prior.log_var.value) * eps

    def forward_generate(self, past_norm, mask, params, langevin: LangevinConfig,
                         noise: NoiseStream, k: int) -> np.ndarray:
        """k candidate futures [k, n, t_pred, 2] in normalized coordinates."""
        past_norm = np.asarray(past_norm)
        n = past_norm.shape[0]
        if k <= 0:
            return np.zeros((0, n, self.cfg.t_pred, 2))
        tape = nx.Tape()
        ctx = self.context(past_norm, mask, params, tape).values
        ctx_k = np.tile(ctx, (k, 1))
        z = self.sample_prior(ctx_k, params, langevin, noise)
        tape = nx.Tape()
        plan = self.decode_plan(z, ctx_k, params, tape)
        traj = self.decode_trajectory(plan, ctx_k, params, tape)
        return traj.value.reshape(k, n, self.cfg.t_pred, 2)


def scene_mask(scene, d: float, social: bool = True) -> PoolingMask:
    if not social:
        return identity_mask(scene.n)
    return build_mask(scene.raw_past(), d)

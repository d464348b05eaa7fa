"""Variational objective, latent-cost gradient and the end-to-end training loop."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .dataio import TrajectoryScene, normalize_scene
from .errors import ConfigError, NumericalError
from .model import LBEBM, ModelConfig, scene_mask
from .pooling import block_mask
from .sampler import LangevinConfig, NoiseStream, langevin_sample, sample_posterior

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "plan_recon", "traj_pred", "kl", "ebm_pos", "ebm_neg_energy_mean",
                  "total", "wall_time_s")


@dataclass
class TrainConfig:
    lr: float = 3e-4
    batch_size: int = 70
    epochs: int = 10
    seed: int = 0
    kl_weight: float = 1.0
    units: str = "meters"
    teacher_forcing: bool = False
    checkpoint_every: int = 0
    detach_positive: bool = True
    pool_d: float = 5.0
    langevin: LangevinConfig = field(default_factory=LangevinConfig)

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size <= 0 or self.epochs < 0 or self.kl_weight < 0:
            raise ConfigError("train settings must be positive")


@dataclass
class LossBreakdown:
    plan_recon: float = 0.0
    traj_pred: float = 0.0
    kl_to_prior: float = 0.0
    ebm_positive: float = 0.0
    ebm_negative: float = 0.0
    total: float = 0.0

    def as_row(self) -> dict:
        return {
            "plan_recon": self.plan_recon,
            "traj_pred": self.traj_pred,
            "kl": self.kl_to_prior,
            "ebm_pos": self.ebm_positive,
            "ebm_neg_energy_mean": self.ebm_negative,
            "total": self.total,
        }


@dataclass
class Batch:
    past: np.ndarray  # [N, t_past, 2], normalized
    future: np.ndarray  # [N, t_pred, 2], normalized
    target: np.ndarray  # [N, len(target_indices), 2]
    mask: np.ndarray  # [N, N] block diagonal
    n_scenes: int

    @property
    def n_agents(self) -> int:
        return self.past.shape[0]


@dataclass
class PreparedScene:
    scene: TrajectoryScene  # normalized
    mask: object


def prepare_scenes(scenes, pool_d: float, social: bool = True) -> list[PreparedScene]:
    """Normalize scenes and compute masks (on raw coordinates) once up front."""
    out = []
    for s in scenes:
        s = normalize_scene(s)
        out.append(PreparedScene(s, scene_mask(s, pool_d, social)))
    return out


def make_batch(prepared, model_cfg: ModelConfig) -> Batch:
    idx = [i - 1 for i in model_cfg.target_indices]
    past = np.concatenate([p.scene.past for p in prepared])
    future = np.concatenate([p.scene.future for p in prepared])
    return Batch(past, future, future[:, idx, :].copy(), block_mask([p.mask for p in prepared]),
                 len(prepared))


@dataclass
class ElboAux:
    ctx: np.ndarray
    z_pos: np.ndarray
    eps: np.ndarray
    nodes: dict


def _mean_rows(node: nx.Node) -> nx.Node:
    return nx.mul(nx.sum_all(node), 1.0 / node.value.shape[0])


def _half_sq(diff: nx.Node) -> nx.Node:
    """Per-agent 0.5 * ||diff||^2 over all trailing axes, shape [n]."""
    flat = nx.reshape(diff, (diff.value.shape[0], -1))
    return nx.mul(nx.sum_axis(nx.square(flat), 1), 0.5)


def elbo_loss(batch: Batch, model: LBEBM, params, noise: NoiseStream, tape: nx.Tape,
              kl_weight: float = 1.0, teacher_forcing: bool = False, eps=None,
              detach_positive: bool = False):
    """Negative variational bound, averaged over agents, minus the partition-function term.

    Returns ``(LossBreakdown, total_node, ElboAux)``. Terms per agent:
    plan reconstruction 0.5|P - mu_beta(z)|^2 with z from q_phi, trajectory
    regression 0.5|Y - mu_gamma(mu_beta(z))|^2, KL(q_phi || p0) and the
    positive-phase cost C(z). The log-partition gradient is added separately
    by :func:`ebm_grad`.
    """
    cfg = model.cfg
    ctx = model.context(batch.past, batch.mask, params, tape)
    post = model.infer_posterior(batch.target, ctx, params, tape)
    z, eps = sample_posterior(post.mu, post.log_var, noise, eps)

    plan_mean = model.decode_plan(z, ctx, params, tape)
    plan_recon = _mean_rows(_half_sq(nx.sub(plan_mean, batch.target)))
    terms = {"plan_recon": plan_recon}

    if cfg.use_plan:
        plan_in = tape.input(batch.target) if teacher_forcing else plan_mean
        traj = model.decode_trajectory(plan_in, ctx, params, tape)
        terms["traj_pred"] = _mean_rows(_half_sq(nx.sub(traj, batch.future)))

    if cfg.prior == "ebm":
        terms["kl"] = _mean_rows(nx.gaussian_kl_std_normal(post.mu, post.log_var))
        z_cost = tape.constant(z.value) if detach_positive else z
        terms["ebm_pos"] = _mean_rows(model.energy(z_cost, ctx, params, tape))
    else:
        prior = model.gaussian_prior(ctx, params, tape)
        terms["kl"] = _mean_rows(nx.gaussian_kl(post.mu, post.log_var, prior.mu, prior.log_var))

    for name, node in terms.items():
        if not np.isfinite(node.value):
            raise NumericalError(f"non-finite {name} term in loss")

    total = terms["plan_recon"]
    if "traj_pred" in terms:
        total = nx.add(total, terms["traj_pred"])
    reg = terms["kl"] if "ebm_pos" not in terms else nx.add(terms["kl"], terms["ebm_pos"])
    total = nx.add(total, nx.mul(reg, kl_weight))

    val = {k: float(v.value) for k, v in terms.items()}
    breakdown = LossBreakdown(
        plan_recon=val["plan_recon"],
        traj_pred=val.get("traj_pred", 0.0),
        kl_to_prior=val["kl"],
        ebm_positive=val.get("ebm_pos", 0.0),
        total=float(total.value),
    )
    aux = ElboAux(ctx.values.copy(), z.value.copy(), eps, {"posterior": post, "z": z, "ctx": ctx})
    return breakdown, total, aux


def ebm_grad(z_pos, z_neg, ctx, model: LBEBM, params, weight: float = 1.0,
             include_positive: bool = True) -> tuple[float, float]:
    """Add weight * (mean dC/dalpha over positives - mean over negatives) to the cost head.

    Samples and context are treated as constants, so only ``ebm.*`` buffers move.
    Returns the mean positive and negative energies.
    """
    z_neg = np.asarray(z_neg)
    if z_neg.shape[0] == 0 or (include_positive and np.asarray(z_pos).shape[0] == 0):
        raise ValueError("ebm_grad needs non-empty sample sets")
    ctx = np.asarray(ctx)
    tape = nx.Tape()
    neg = _mean_rows(model.energy(z_neg, _match_ctx(ctx, z_neg), params, tape))
    e_pos = 0.0
    loss = nx.mul(neg, -weight)
    if include_positive:
        z_pos = np.asarray(z_pos)
        pos = _mean_rows(model.energy(z_pos, _match_ctx(ctx, z_pos), params, tape))
        e_pos = float(pos.value)
        loss = nx.add(nx.mul(pos, weight), loss)
    tape.backward(loss, params)
    return e_pos, float(neg.value)


def _match_ctx(ctx, z):
    """Repeat context rows when several samples share one agent."""
    n, m = ctx.shape[0], np.asarray(z).shape[0]
    if m == n:
        return ctx
    if m % n:
        raise ValueError(f"{m} samples cannot be matched to {n} context rows")
    return np.tile(ctx, (m // n, 1))


@dataclass
class StepInfo:
    breakdown: LossBreakdown
    langevin_calls: int


def train_step(batch: Batch, model: LBEBM, params, adam: nx.AdamState, cfg: TrainConfig,
               noise: NoiseStream) -> StepInfo:
    """One Adam step on the bound plus the Langevin negative phase.

    Negatives are constants; their cost is scored on the live context so the
    log-partition gradient reaches the pooling and encoder weights as well as
    the cost head.
    """
    params.zero_grad()
    tape = nx.Tape()
    breakdown, total, aux = elbo_loss(batch, model, params, noise, tape, cfg.kl_weight,
                                      cfg.teacher_forcing, detach_positive=cfg.detach_positive)
    calls = 0
    if model.cfg.prior == "ebm":
        z_neg = langevin_sample(aux.ctx, params, cfg.langevin, noise, model.energy_fn(),
                                model.cfg.latent_dim)
        calls += 1
        neg = _mean_rows(model.energy(z_neg, aux.nodes["ctx"], params, tape))
        total = nx.sub(total, nx.mul(neg, cfg.kl_weight))
        breakdown.ebm_negative = float(neg.value)
        breakdown.total = float(total.value)
    tape.backward(total, params)
    nx.adam_step(params, adam)
    return StepInfo(breakdown, calls)


@dataclass
class TrainResult:
    params: nx.ParamStore
    history: list = field(default_factory=list)
    langevin_calls: int = 0


def _write_metrics(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        w.writeheader()
        for row in history:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def train(scenes, model: LBEBM, cfg: TrainConfig, params=None, run_dir=None,
          prepared=None) -> TrainResult:
    """Minibatch Adam on the variational objective with fresh Langevin negatives each step."""
    params = params if params is not None else model.init_params(cfg.seed)
    prepared = prepared if prepared is not None else prepare_scenes(scenes, cfg.pool_d, model.cfg.social)
    ckpt_dir = None
    if run_dir is not None:
        ckpt_dir = Path(run_dir) / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        nx.save_checkpoint(params, ckpt_dir / "init.ckpt")
    adam = nx.AdamState(lr=cfg.lr)
    noise = NoiseStream(cfg.seed)
    order_rng = np.random.Generator(np.random.PCG64(cfg.seed + 1))
    result = TrainResult(params)
    t0 = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        order = order_rng.permutation(len(prepared))
        sums = LossBreakdown()
        weight = 0
        try:
            for start in range(0, len(order), cfg.batch_size):
                chunk = [prepared[i] for i in order[start : start + cfg.batch_size]]
                batch = make_batch(chunk, model.cfg)
                info = train_step(batch, model, params, adam, cfg, noise)
                result.langevin_calls += info.langevin_calls
                b = info.breakdown
                n = batch.n_agents
                for key in ("plan_recon", "traj_pred", "kl_to_prior", "ebm_positive", "ebm_negative", "total"):
                    setattr(sums, key, getattr(sums, key) + n * getattr(b, key))
                weight += n
        except NumericalError:
            log.error("numerical failure in epoch %d; last good checkpoint kept", epoch)
            if run_dir is not None:
                _write_metrics(Path(run_dir) / "metrics.csv", result.history)
            raise
        row = {"epoch": epoch}
        row.update({k: v / max(weight, 1) for k, v in LossBreakdown(
            sums.plan_recon, sums.traj_pred, sums.kl_to_prior, sums.ebm_positive,
            sums.ebm_negative, sums.total).as_row().items()})
        row["wall_time_s"] = time.perf_counter() - t0
        result.history.append(row)
        log.info("epoch %d total %.4f plan %.4f traj %.4f kl %.4f", epoch, row["total"],
                 row["plan_recon"], row["traj_pred"], row["kl"])
        if ckpt_dir is not None and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            nx.save_checkpoint(params, ckpt_dir / f"epoch_{epoch:04d}.ckpt")
    if run_dir is not None:
        if cfg.epochs > 0:  # an untrained run is fully described by init.ckpt
            nx.save_checkpoint(params, ckpt_dir / "final.ckpt")
        _write_metrics(Path(run_dir) / "metrics.csv", result.history)
    return result


# ---------------------------------------------------------------------------
# Ablations
# ---------------------------------------------------------------------------

ABLATIONS = {
    "ebm-plan": dict(prior="ebm", use_plan=True, social=True),
    "ebm-plan-no-social": dict(prior="ebm", use_plan=True, social=False),
    "gaussian-plan": dict(prior="gaussian", use_plan=True, social=True),
    "ebm-no-plan": dict(prior="ebm", use_plan=False, social=True),
    "gaussian-no-plan": dict(prior="gaussian", use_plan=False, social=True),
}


def ablation_config(name: str) -> dict:
    """Model wiring overrides for a named ablation condition."""
    if name not in ABLATIONS:
        raise ConfigError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
    return dict(ABLATIONS[name])

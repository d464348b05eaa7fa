"""Displacement metrics, best-of-K selection, KDE likelihood and the benchmark driver."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .dataio import normalize_scene
from .errors import DataError, DimensionError
from .model import scene_mask
from .sampler import BlockNoise, NoiseStream

log = logging.getLogger(__name__)

BANDWIDTH_FLOOR = 1e-3


def ade_fde(pred, truth):
    """Per-agent mean and final Euclidean displacement for [n, t, 2] arrays."""
    pred, truth = np.asarray(pred, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise DimensionError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    dist = np.sqrt(((pred - truth) ** 2).sum(-1))
    return dist.mean(-1), dist[..., -1]


@dataclass
class MetricReport:
    ade: float
    fde: float
    k: int
    nll: float | None = None
    units: str = "meters"
    ade_per_agent: np.ndarray = None
    fde_per_agent: np.ndarray = None
    ade_index: np.ndarray = None  # winning sample per agent
    fde_index: np.ndarray = None
    per_scene: list = field(default_factory=list)

    def summary(self) -> dict:
        return {"ade": self.ade, "fde": self.fde, "k": self.k, "nll": self.nll, "units": self.units}


def best_of_k(samples, truth, independent: bool = True, units: str = "meters") -> MetricReport:
    """Min over samples of each agent's ADE and FDE, averaged over agents.

    With ``independent=False`` FDE is read from the sample that minimized ADE.
    Ties go to the lowest sample index.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 4 or samples.shape[0] == 0:
        raise ValueError("best_of_k needs at least one sample of shape [k, n, t, 2]")
    if samples.shape[1:] != np.shape(truth):
        raise DimensionError(f"samples {samples.shape} do not match truth {np.shape(truth)}")
    ade, fde = ade_fde(samples, np.broadcast_to(truth, samples.shape))  # [k, n]
    ai = np.argmin(ade, axis=0)
    fi = np.argmin(fde, axis=0) if independent else ai
    cols = np.arange(samples.shape[1])
    ade_min, fde_min = ade[ai, cols], fde[fi, cols]
    return MetricReport(float(ade_min.mean()), float(fde_min.mean()), samples.shape[0],
                        units=units, ade_per_agent=ade_min, fde_per_agent=fde_min,
                        ade_index=ai, fde_index=fi)


def scott_bandwidth(points) -> float:
    """Isotropic Scott's rule in 2-D: pooled std times k^(-1/6)."""
    points = np.asarray(points)
    k = points.shape[0]
    if k < 2:
        return 0.0
    sigma = np.sqrt(points.var(axis=0, ddof=1).mean())
    return float(sigma * k ** (-1.0 / 6.0))


def kde_nll(samples, truth, bandwidth=None, floor: float = BANDWIDTH_FLOOR, warnings=None) -> float:
    """Mean negative log density of the truth under per-step isotropic Gaussian KDEs.

    A KDE is fitted to the k sample positions of each (agent, step); the NLL is
    averaged over steps, then agents. ``bandwidth`` fixes h instead of Scott's rule.
    """
    samples = np.asarray(samples, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    k, n, t, _ = samples.shape
    if k < 2 and bandwidth is None:
        raise ValueError("KDE needs at least two samples")
    if samples.shape[1:] != truth.shape:
        raise DimensionError(f"samples {samples.shape} do not match truth {truth.shape}")
    per_agent = np.empty(n)
    for i in range(n):
        step_nll = np.empty(t)
        for s in range(t):
            pts = samples[:, i, s, :]
            if bandwidth is None:
                h = scott_bandwidth(pts)
                if h < floor:
                    if warnings is not None:
                        warnings.append(f"agent {i} step {s}: bandwidth {h:.3g} floored to {floor}")
                    h = floor
            else:
                h = float(bandwidth)
            sq = ((pts - truth[i, s]) ** 2).sum(-1)
            log_dens = logsumexp(-sq / (2.0 * h * h)) - np.log(k) - np.log(2.0 * np.pi * h * h)
            step_nll[s] = -log_dens
        per_agent[i] = step_nll.mean()
    return float(per_agent.mean())


# ---------------------------------------------------------------------------
# Predictors and benchmark
# ---------------------------------------------------------------------------


def constant_velocity(past, t_pred: int) -> np.ndarray:
    """Extrapolate the last observed displacement: [n, t_pred, 2]."""
    past = np.asarray(past, dtype=np.float64)
    v = past[:, -1] - past[:, -2]
    steps = np.arange(1, t_pred + 1)[None, :, None]
    return past[:, -1:, :] + steps * v[:, None, :]


class ModelPredictor:
    """Draws k futures from a trained model for one scene, in dataset units.

    Each of the k samples has its own noise stream seeded from one draw of
    ``noise``, so sample j is the same whatever k is (best-of-k is then
    non-increasing in k for a fixed seed).
    """

    def __init__(self, model, params, langevin, pool_d):
        self.model, self.params, self.langevin, self.pool_d = model, params, langevin, pool_d

    def __call__(self, scene, k, noise):
        norm = normalize_scene(scene)
        mask = scene_mask(norm, self.pool_d, self.model.cfg.social)
        block = BlockNoise(noise.integer_seed(), max(k, 1))
        samples = self.model.forward_generate(norm.past, mask, self.params, self.langevin, block, k)
        return samples + norm.origin_offsets[None, :, None, :]


def truth_predictor(scene, k, noise):
    return np.repeat(scene.raw_future()[None], k, axis=0)


def linear_predictor(scene, k, noise):
    return np.repeat(constant_velocity(scene.raw_past(), scene.future.shape[1])[None], k, axis=0)


PREDICTORS = {"truth": truth_predictor, "linear": linear_predictor}


@dataclass
class BenchmarkReport:
    overall: MetricReport
    rows: list  # per-scene dicts

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=["scene_id", "n_agents", "ade", "fde", "nll"], lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else ("" if v is None else v)) for k, v in r.items()})
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(self.overall.summary(), indent=2, sort_keys=True)

    def summary_text(self) -> str:
        o = self.overall
        nll = "n/a" if o.nll is None else f"{o.nll:.4f}"
        return (
            f"scenes: {len(self.rows)}  agents: {sum(r['n_agents'] for r in self.rows)}\n"
            f"best-of-{o.k} ADE: {o.ade:.4f} {o.units}\n"
            f"best-of-{o.k} FDE: {o.fde:.4f} {o.units}\n"
            f"KDE NLL: {nll}"
        )


def run_benchmark(scenes, predictor, k: int = 20, seed: int = 0, units: str = "meters",
                  with_nll: bool = True, independent: bool = True) -> BenchmarkReport:
    """Evaluate ``predictor(scene, k, noise) -> [k, n, t, 2]`` over test scenes."""
    if k < 1:
        raise ValueError("k must be at least 1")
    noise = NoiseStream(seed)
    rows, ade_all, fde_all, nll_all = [], [], [], []
    for scene in scenes:
        if scene.units != units:
            raise DataError(f"scene {scene.scene_id} is in {scene.units}, model expects {units}")
        samples = predictor(scene, k, noise)
        truth = scene.raw_future()
        rep = best_of_k(samples, truth, independent, units)
        nll = kde_nll(samples, truth) if with_nll and k >= 2 else None
        rows.append({"scene_id": scene.scene_id, "n_agents": scene.n, "ade": rep.ade, "fde": rep.fde, "nll": nll})
        ade_all.append(rep.ade_per_agent)
        fde_all.append(rep.fde_per_agent)
        if nll is not None:
            nll_all.append(np.full(scene.n, nll))
    if not rows:
        raise DataError("no test scenes to evaluate")
    ade = np.concatenate(ade_all)
    fde = np.concatenate(fde_all)
    overall = MetricReport(float(ade.mean()), float(fde.mean()), k,
                           float(np.concatenate(nll_all).mean()) if nll_all else None, units,
                           ade_per_agent=ade, fde_per_agent=fde, per_scene=rows)
    return BenchmarkReport(overall, rows)

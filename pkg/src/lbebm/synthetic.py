"""Toy multi-agent worlds with known structure: a Y-junction, a crossing pair, straight walkers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataio import RawTrack, T_PAST, T_PRED, TrajectoryScene
from .errors import ConfigError

SCENARIOS = ("y_junction", "crossing_pair", "straight")
LEFT, RIGHT = 0, 1
CROSSING_MIN_DIST = 0.5


@dataclass
class SyntheticSpec:
    scenario: str = "y_junction"
    n_scenes: int = 100
    mode_probabilities: tuple = (0.5, 0.5)
    speed: float = 0.5
    noise_sigma: float = 0.0
    seed: int = 0
    branch_angle_deg: float = 45.0
    crossing_step: int = 5
    crossing_angle_deg: float = 25.0
    swerve: float = 0.6

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}")
        p = np.asarray(self.mode_probabilities, dtype=float)
        if p.ndim != 1 or np.any(p < 0) or not np.isclose(p.sum(), 1.0):
            raise ConfigError("mode_probabilities must be non-negative and sum to 1")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")


@dataclass
class JunctionGeometry:
    """Per-agent branch origin (last observed point) and walking direction, raw coordinates."""

    origin: np.ndarray  # [n, 2]
    heading: np.ndarray  # [n, 2], unit


@dataclass
class SyntheticWorld:
    scenes: list
    labels: list  # per scene: mode label (int)
    geometry: list = field(default_factory=list)


def _rot(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def _times():
    return np.arange(-(T_PAST - 1), T_PRED + 1, dtype=np.float64)  # 20 steps, 0 = last observed


def _y_junction(spec, rng, idx):
    label = int(rng.choice(len(spec.mode_probabilities), p=spec.mode_probabilities))
    t = _times()
    pos = np.zeros((20, 2))
    pos[:, 0] = spec.speed * t
    side = 1.0 if label == LEFT else -1.0
    ang = np.deg2rad(spec.branch_angle_deg)
    fut = t > 0
    pos[fut, 0] = spec.speed * t[fut] * np.cos(ang)
    pos[fut, 1] = side * spec.speed * t[fut] * np.sin(ang)
    origin = rng.uniform(-10, 10, size=2)
    pos = pos + origin
    if spec.noise_sigma > 0:
        pos = pos + rng.normal(0.0, spec.noise_sigma, pos.shape)
    scene = TrajectoryScene(f"y_junction_{idx}", pos[None, :T_PAST], pos[None, T_PAST:])
    geom = JunctionGeometry(origin[None, :].copy(), np.array([[1.0, 0.0]]))
    return scene, label, geom


def _crossing_paths(spec, sigma):
    """Noise-free avoiding paths for two agents that would otherwise meet at the origin."""
    t = _times()
    tc, v = spec.crossing_step, spec.speed
    th = np.deg2rad(spec.crossing_angle_deg)
    head_a = np.array([1.0, 0.0])
    head_b = np.array([-np.cos(th), -sigma * np.sin(th)])
    pa = (t - tc)[:, None] * v * head_a
    pb = (t - tc)[:, None] * v * head_b
    rel = v * (head_b - head_a)
    normal = np.array([-rel[1], rel[0]]) / np.linalg.norm(rel)
    ramp = spec.swerve * np.clip(t / tc, 0.0, 1.0)[:, None]
    # A sidesteps to one side of the relative motion, B to the other; which side flips with sigma
    pa = pa - sigma * ramp * normal
    pb = pb + sigma * ramp * normal
    return np.stack([pa, pb])


def _crossing_pair(spec, rng, idx):
    label = int(rng.choice(len(spec.mode_probabilities), p=spec.mode_probabilities))
    sigma = 1.0 if label == LEFT else -1.0
    paths = _crossing_paths(spec, sigma)
    shift = rng.uniform(-10, 10, size=2)
    for _ in range(100):
        noisy = paths + (rng.normal(0.0, spec.noise_sigma, paths.shape) if spec.noise_sigma > 0 else 0.0)
        if min_future_distance(noisy[:, T_PAST:]) >= CROSSING_MIN_DIST:
            break
    else:  # pragma: no cover - only with absurd noise levels
        noisy = paths
    noisy = noisy + shift
    scene = TrajectoryScene(f"crossing_pair_{idx}", noisy[:, :T_PAST], noisy[:, T_PAST:])
    return scene, label, None


def _straight(spec, rng, idx):
    heading = rng.uniform(0, 2 * np.pi)
    vel = spec.speed * np.array([np.cos(heading), np.sin(heading)])
    t = _times()
    pos = t[:, None] * vel + rng.uniform(-10, 10, size=2)
    if spec.noise_sigma > 0:
        pos = pos + rng.normal(0.0, spec.noise_sigma, pos.shape)
    return TrajectoryScene(f"straight_{idx}", pos[None, :T_PAST], pos[None, T_PAST:]), 0, None


def generate(spec: SyntheticSpec) -> SyntheticWorld:
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    make = {"y_junction": _y_junction, "crossing_pair": _crossing_pair, "straight": _straight}[spec.scenario]
    world = SyntheticWorld([], [])
    for i in range(spec.n_scenes):
        scene, label, geom = make(spec, rng, i)
        world.scenes.append(scene)
        world.labels.append(label)
        world.geometry.append(geom)
    return world


def min_future_distance(future) -> float:
    """Smallest same-step distance between the two agents of a [2, t, 2] array."""
    future = np.asarray(future)
    return float(np.sqrt(((future[0] - future[1]) ** 2).sum(-1)).min())


def classify_modes(samples, geom: JunctionGeometry) -> np.ndarray:
    """LEFT/RIGHT label per sample and agent from the sign of the final lateral offset.

    Zero lateral offset counts as LEFT.
    """
    samples = np.asarray(samples)  # [k, n, t, 2]
    final = samples[:, :, -1, :] - geom.origin[None]
    lateral = geom.heading[None, :, 0] * final[..., 1] - geom.heading[None, :, 1] * final[..., 0]
    return np.where(lateral >= 0, LEFT, RIGHT)


def mode_coverage(samples_per_scene, geometries) -> float:
    """Fraction of scenes where every agent has at least one sample in each branch."""
    if not geometries or any(not isinstance(g, JunctionGeometry) for g in geometries):
        raise ConfigError("mode_coverage needs junction geometry for every scene")
    covered = 0
    for samples, geom in zip(samples_per_scene, geometries):
        modes = classify_modes(samples, geom)
        both = np.all((modes == LEFT).any(axis=0) & (modes == RIGHT).any(axis=0))
        covered += bool(both)
    return covered / len(geometries)


def to_tracks(world: SyntheticWorld, frame_step: int = 10, gap: int = 5) -> dict:
    """Lay scenes end to end in time with fresh agent ids so they round-trip through files."""
    tracks = {}
    agent = 0
    frame0 = 0
    for scene in world.scenes:
        pos = np.concatenate([scene.raw_past(), scene.raw_future()], axis=1)
        frames = frame0 + frame_step * np.arange(pos.shape[1])
        for i in range(scene.n):
            tracks[agent] = RawTrack(agent, frames.copy(), pos[i].copy())
            agent += 1
        frame0 = int(frames[-1]) + frame_step * gap
    return tracks

"""Trajectory file ingestion, scene windowing, normalization and splits."""

from __future__ import annotations

import os
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, ParseError
from .numerics import decode_arrays, encode_arrays

T_PAST = 8
T_PRED = 12
PLAN_INDICES = (3, 6, 9, 12)
UNITS = ("meters", "pixels")

ETH_UCY_SCENES = ("eth", "hotel", "univ", "zara1", "zara2")


@dataclass
class RawTrack:
    agent_id: int
    frames: np.ndarray  # [m] int
    xy: np.ndarray  # [m, 2]

    def __len__(self):
        return len(self.frames)


@dataclass
class TrajectoryScene:
    scene_id: str
    past: np.ndarray  # [n, t_past, 2]
    future: np.ndarray  # [n, t_pred, 2]
    origin_offsets: np.ndarray = None  # [n, 2]
    units: str = "meters"
    agent_ids: tuple = ()
    # raw coordinates kept by normalize_scene so inversion is bit-exact
    raw: tuple = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.past = np.asarray(self.past, dtype=np.float64)
        self.future = np.asarray(self.future, dtype=np.float64)
        if self.origin_offsets is None:
            self.origin_offsets = np.zeros((self.past.shape[0], 2))
        if not self.agent_ids:
            self.agent_ids = tuple(range(self.past.shape[0]))

    @property
    def n(self) -> int:
        return self.past.shape[0]

    def raw_past(self) -> np.ndarray:
        if self.raw is not None:
            return self.raw[0]
        return self.past + self.origin_offsets[:, None, :]

    def raw_future(self) -> np.ndarray:
        if self.raw is not None:
            return self.raw[1]
        return self.future + self.origin_offsets[:, None, :]


@dataclass
class Plan:
    waypoints: np.ndarray  # [n, len(indices), 2]
    indices: tuple = PLAN_INDICES


def parse_trajectory_file(path, units: str = "meters") -> dict[int, RawTrack]:
    """Read ``frame_id agent_id x y`` lines; returns tracks keyed by agent id."""
    if units not in UNITS:
        raise ConfigError(f"unknown units {units!r}")
    rows = defaultdict(list)
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.replace(",", " ").split()
            if len(parts) != 4:
                raise ParseError(path, lineno, f"expected 4 fields, got {len(parts)}")
            try:
                frame = float(parts[0])
                agent = float(parts[1])
                x, y = float(parts[2]), float(parts[3])
            except ValueError as exc:
                raise ParseError(path, lineno, str(exc)) from None
            if frame != int(frame) or agent != int(agent):
                raise ParseError(path, lineno, "frame_id and agent_id must be integers")
            if not (np.isfinite(x) and np.isfinite(y)):
                raise ParseError(path, lineno, "non-finite position")
            rows[int(agent)].append((int(frame), x, y, lineno))

    tracks = {}
    for agent in sorted(rows):
        recs = rows[agent]
        recs.sort(key=lambda r: (r[0], r[3]))
        frames = np.array([r[0] for r in recs], dtype=np.int64)
        if np.any(np.diff(frames) <= 0):
            dup = int(frames[1:][np.diff(frames) <= 0][0])
            raise DataError(f"{path}: agent {agent} has repeated frame {dup}")
        tracks[agent] = RawTrack(agent, frames, np.array([[r[1], r[2]] for r in recs]))
    return tracks


def write_trajectory_file(path, tracks) -> None:
    """Write tracks (dict of RawTrack) in the plain-text ingestion format."""
    lines = []
    for track in tracks.values():
        for f, (x, y) in zip(track.frames, track.xy):
            lines.append((int(f), track.agent_id, repr(float(x)), repr(float(y))))
    lines.sort(key=lambda r: (r[0], r[1]))
    with open(path, "w") as fh:
        for f, a, x, y in lines:
            fh.write(f"{f} {a} {x} {y}\n")


def frame_step_of(tracks) -> int:
    """Most common positive frame increment across all tracks."""
    diffs = np.concatenate([np.diff(t.frames) for t in tracks.values() if len(t) > 1] or [np.array([1])])
    vals, counts = np.unique(diffs, return_counts=True)
    return int(vals[np.argmax(counts)])


def window_scenes(tracks, t_past=T_PAST, t_pred=T_PRED, stride=1, scene_id="scene",
                  units="meters", frame_step=None) -> list[TrajectoryScene]:
    """Slide a window of ``t_past + t_pred`` frames over the recording.

    A window keeps exactly the agents observed at every one of its frames.
    """
    if not tracks:
        return []
    step = frame_step or frame_step_of(tracks)
    total = t_past + t_pred
    lookup = {a: dict(zip(t.frames.tolist(), range(len(t)))) for a, t in tracks.items()}
    first = min(int(t.frames[0]) for t in tracks.values())
    last = max(int(t.frames[-1]) for t in tracks.values())
    scenes = []
    start = first
    while start + (total - 1) * step <= last:
        frames = [start + k * step for k in range(total)]
        members = []
        for a, idx in lookup.items():
            if all(f in idx for f in frames):
                members.append(a)
        if members:
            pos = np.stack([tracks[a].xy[[lookup[a][f] for f in frames]] for a in members])
            scenes.append(
                TrajectoryScene(
                    f"{scene_id}@{start}",
                    pos[:, :t_past].copy(),
                    pos[:, t_past:].copy(),
                    units=units,
                    agent_ids=tuple(members),
                )
            )
        start += stride * step
    return scenes


def normalize_scene(scene: TrajectoryScene) -> TrajectoryScene:
    """Shift each agent so its last observed position is the origin."""
    raw_past, raw_future = scene.raw_past(), scene.raw_future()
    offsets = raw_past[:, -1, :].copy()
    return replace(
        scene,
        past=raw_past - offsets[:, None, :],
        future=raw_future - offsets[:, None, :],
        origin_offsets=offsets,
        raw=(raw_past, raw_future),
    )


def denormalize_scene(scene: TrajectoryScene) -> TrajectoryScene:
    return replace(
        scene,
        past=scene.raw_past(),
        future=scene.raw_future(),
        origin_offsets=np.zeros_like(scene.origin_offsets),
        raw=None,
    )


def denormalize_positions(positions: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Add per-agent offsets to ``[..., n, t, 2]`` positions."""
    return positions + offsets[:, None, :]


def extract_plan(scene: TrajectoryScene, indices=PLAN_INDICES) -> Plan:
    t_pred = scene.future.shape[1]
    for i in indices:
        if not 1 <= i <= t_pred:
            raise ConfigError(f"plan index {i} outside [1, {t_pred}]")
    idx = [i - 1 for i in indices]
    return Plan(scene.future[:, idx, :].copy(), tuple(indices))


# ---------------------------------------------------------------------------
# Datasets and splits
# ---------------------------------------------------------------------------


@dataclass
class Manifest:
    """Dataset description: scene group name -> list of trajectory files."""

    name: str
    units: str
    groups: dict = field(default_factory=dict)
    train: list = field(default_factory=list)
    test: list = field(default_factory=list)
    root: Path = Path(".")


def read_manifest(path) -> Manifest:
    """Parse a manifest of ``key = value`` lines.

    Recognised keys: ``name``, ``units``, ``group.<scene> = file [file ...]``,
    ``train = file ...`` and ``test = file ...`` (for fixed splits such as SDD).
    Paths are relative to the manifest's directory.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    m = Manifest(name=path.stem, units="meters", root=path.parent)
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(path, lineno, "expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key == "name":
            m.name = value
        elif key == "units":
            if value not in UNITS:
                raise ConfigError(f"{path}:{lineno}: unknown units {value!r}")
            m.units = value
        elif key.startswith("group."):
            m.groups[key[len("group."):]] = value.split()
        elif key == "train":
            m.train = value.split()
        elif key == "test":
            m.test = value.split()
        else:
            raise ConfigError(f"{path}:{lineno}: unknown manifest key {key!r}")
    return m


def build_split(manifest: Manifest, mode: str) -> tuple[list[str], list[str]]:
    """Return (train files, test files), as paths, for a split mode.

    ``mode`` is ``standard`` (uses the manifest's train/test lists) or
    ``leave-one-out:<scene>`` (train on every other group).
    """
    root = manifest.root
    if mode == "standard":
        if not manifest.train or not manifest.test:
            raise ConfigError(f"manifest {manifest.name!r} has no train/test lists")
        train = [str(root / f) for f in manifest.train]
        test = [str(root / f) for f in manifest.test]
    elif mode.startswith("leave-one-out:"):
        held = mode.split(":", 1)[1]
        if held not in manifest.groups:
            raise ConfigError(f"unknown scene {held!r}; have {sorted(manifest.groups)}")
        train = [str(root / f) for g in sorted(manifest.groups) if g != held for f in manifest.groups[g]]
        test = [str(root / f) for f in manifest.groups[held]]
    else:
        raise ConfigError(f"unknown split mode {mode!r}")
    if set(train) & set(test):
        raise DataError("train and test file sets overlap")
    return train, test


def load_scenes(files, units, stride=1, t_past=T_PAST, t_pred=T_PRED) -> list[TrajectoryScene]:
    scenes = []
    for f in files:
        if not os.path.exists(f):
            raise DataError(f"trajectory file not found: {f}")
        tracks = parse_trajectory_file(f, units)
        scenes.extend(
            window_scenes(tracks, t_past, t_pred, stride=stride, scene_id=Path(f).stem, units=units)
        )
    return scenes


def load_split(manifest_path, mode, t_past=T_PAST, t_pred=T_PRED):
    """Build and window a split: stride 1 for train, non-overlapping for test."""
    manifest = read_manifest(manifest_path)
    train_files, test_files = build_split(manifest, mode)
    train = load_scenes(train_files, manifest.units, 1, t_past, t_pred)
    test = load_scenes(test_files, manifest.units, t_past + t_pred, t_past, t_pred)
    return train, test, manifest


# ---------------------------------------------------------------------------
# Preprocessing cache
# ---------------------------------------------------------------------------


def save_scene_cache(scenes, path) -> None:
    entries = []
    for k, s in enumerate(scenes):
        for part, arr in (("past", s.past), ("future", s.future), ("offsets", s.origin_offsets)):
            entries.append((f"{k}|{s.units}|{s.scene_id}|{part}", arr))
    with open(path, "wb") as fh:
        fh.write(encode_arrays(entries))


def load_scene_cache(path) -> list[TrajectoryScene]:
    with open(path, "rb") as fh:
        entries = decode_arrays(fh.read())
    scenes = []
    for i in range(0, len(entries), 3):
        (name, past), (_, future), (_, offsets) = entries[i : i + 3]
        _, units, rest = name.split("|", 2)
        scene_id = rest.rsplit("|", 1)[0]
        scenes.append(
            TrajectoryScene(scene_id, past.astype(np.float64), future.astype(np.float64),
                            offsets.astype(np.float64), units)
        )
    return scenes

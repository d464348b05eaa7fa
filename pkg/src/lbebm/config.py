"""Flat dotted-key run configuration: ``key = value`` files plus overrides."""

from __future__ import annotations

import os
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig
from .sampler import LangevinConfig
from .training import ABLATIONS, TrainConfig

DEFAULTS = {
    "ablation": "ebm-plan",
    "model.latent_dim": 16,
    "model.hidden": 200,
    "model.layers": 3,
    "model.plan_indices": "3,6,9,12",
    "pool.d": 5.0,
    "pool.dim": 64,
    "sampler.steps": 20,
    "sampler.step_size": 0.08,
    "sampler.noise_on": True,
    "sampler.seed": 0,
    "train.lr": 3e-4,
    "train.batch_size": 70,
    "train.epochs": 10,
    "train.seed": 0,
    "train.kl_weight": 1.0,
    "train.teacher_forcing": False,
    "train.detach_positive": True,
    "train.checkpoint_every": 0,
    "data.manifest": "",
    "data.mode": "standard",
    "data.units": "meters",
    "data.synthetic": "",
    "data.n_scenes": 2000,
    "data.n_test": 200,
    "data.noise_sigma": 0.05,
    "data.seed": 0,
    "eval.k": 20,
    "eval.seed": 0,
    "eval.nll": True,
    "eval.independent_minima": True,
    "run.dir": "runs/default",
}

# Keys a run must record to be reproducible; everything above is written out.
SEED_KEYS = ("train.seed", "sampler.seed", "eval.seed", "data.seed")


def _coerce(key: str, raw):
    default = DEFAULTS[key]
    if isinstance(raw, type(default)) and not isinstance(raw, str):
        return raw
    text = str(raw).strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None
    return text


def read_config_file(path) -> dict:
    """Raw ``key = value`` pairs from a config file, in file order."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    out = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


class RunConfig(dict):
    """Fully-resolved configuration keyed by dotted names."""

    @classmethod
    def load(cls, path=None, overrides=None) -> "RunConfig":
        cfg = cls(DEFAULTS)
        explicit = set()
        for key, value in read_config_file(path).items() if path else ():
            cfg.set(key, value)
            explicit.add(key)
        for key, value in (overrides or {}).items():
            cfg.set(key, value)
            explicit.add(key)
        env_seed = os.environ.get("LBEBM_SEED")
        if env_seed is not None:
            for key in SEED_KEYS:
                if key not in explicit:
                    cfg.set(key, env_seed)
        return cfg

    def set(self, key, value):
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        self[key] = _coerce(key, value)

    def dumps(self) -> str:
        return "".join(f"{k} = {_fmt(self[k])}\n" for k in sorted(self))

    def write(self, path) -> None:
        Path(path).write_text(self.dumps())

    # ---- typed views ----------------------------------------------------

    def model_config(self) -> ModelConfig:
        if self["ablation"] not in ABLATIONS:
            raise ConfigError(f"unknown ablation {self['ablation']!r}")
        indices = tuple(int(s) for s in str(self["model.plan_indices"]).split(",") if s.strip())
        return ModelConfig(
            latent_dim=self["model.latent_dim"],
            hidden=self["model.hidden"],
            layers=self["model.layers"],
            pool_dim=self["pool.dim"],
            plan_indices=indices,
            **ABLATIONS[self["ablation"]],
        )

    def langevin_config(self) -> LangevinConfig:
        return LangevinConfig(self["sampler.steps"], self["sampler.step_size"], self["sampler.noise_on"])

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lr=self["train.lr"],
            batch_size=self["train.batch_size"],
            epochs=self["train.epochs"],
            seed=self["train.seed"],
            kl_weight=self["train.kl_weight"],
            units=self["data.units"],
            teacher_forcing=self["train.teacher_forcing"],
            checkpoint_every=self["train.checkpoint_every"],
            pool_d=self["pool.d"],
            langevin=self.langevin_config(),
            detach_positive=self["train.detach_positive"],
        )


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)

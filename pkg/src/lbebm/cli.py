"""Command-line front end: ``lbebm {train,evaluate,sample,gradcheck,synth}``.

Every subcommand accepts ``--config FILE`` plus ``--<dotted.key> value`` overrides;
exit codes are 0 (ok), 1 (usage/config), 2 (data) and 3 (numerical failure).
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import numerics as nx
from .config import DEFAULTS, SEED_KEYS, RunConfig, read_config_file
from .dataio import load_split, write_trajectory_file
from .diagnostics import SCALES, TOLERANCE, run_suite
from .errors import ConfigError, DataError, LBEBMError
from .evaluation import PREDICTORS, ModelPredictor, run_benchmark
from .model import LBEBM
from .sampler import NoiseStream
from .synthetic import SCENARIOS, SyntheticSpec, generate, to_tracks
from .training import ABLATIONS, METRIC_COLUMNS, train

log = logging.getLogger("lbebm")

ALIASES = {
    "epochs": "train.epochs",
    "ablation": "ablation",
    "run_dir": "run.dir",
    "manifest": "data.manifest",
    "synthetic": "data.synthetic",
    "mode": "data.mode",
    "k": "eval.k",
    "batch_size": "train.batch_size",
    "lr": "train.lr",
}


class UsageError(LBEBMError):
    exit_code = 1


# ---------------------------------------------------------------------------
# Argument handling
# ---------------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lbebm", description="Latent-belief energy-based trajectory forecasting.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="flat 'key = value' config file")
        sp.add_argument("--seed", type=int, help="sets every seed key")
        return sp

    t = common(sub.add_parser("train", help="train a model into a run directory"))
    t.add_argument("--epochs", type=int)
    t.add_argument("--ablation", choices=sorted(ABLATIONS))
    t.add_argument("--run-dir", dest="run_dir")
    t.add_argument("--manifest")
    t.add_argument("--synthetic", choices=SCENARIOS)

    e = common(sub.add_parser("evaluate", help="best-of-k ADE/FDE and KDE NLL on test scenes"))
    e.add_argument("--checkpoint", help="checkpoint file (its run directory supplies the model config)")
    e.add_argument("--predictor", choices=["model", *sorted(PREDICTORS)], default="model")
    e.add_argument("--k", type=int)
    e.add_argument("--manifest")
    e.add_argument("--synthetic", choices=SCENARIOS)
    e.add_argument("--json", action="store_true", help="print the summary as JSON")
    e.add_argument("--out", help="output directory (default: <run>/eval)")

    s = common(sub.add_parser("sample", help="export sampled futures for one scene as CSV/SVG/PNG"))
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--scene", default="0", help="scene id or index into the test scenes")
    s.add_argument("--k", type=int)
    s.add_argument("--manifest")
    s.add_argument("--synthetic", choices=SCENARIOS)
    s.add_argument("--out", help="output directory (default: <run>/samples)")

    g = sub.add_parser("gradcheck", help="finite-difference check of every head and the full objective")
    g.add_argument("--scale", choices=sorted(SCALES), default="tiny")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--tolerance", type=float, default=TOLERANCE)
    g.add_argument("--inject-fault", action="store_true", help="perturb one analytic gradient (self-test)")

    y = sub.add_parser("synth", help="write a synthetic world as trajectory files plus a manifest")
    y.add_argument("--scenario", choices=SCENARIOS, default="y_junction")
    y.add_argument("--n-scenes", type=int, default=200)
    y.add_argument("--n-test", type=int, default=50)
    y.add_argument("--noise-sigma", type=float, default=0.05)
    y.add_argument("--seed", type=int, default=0)
    y.add_argument("--out", required=True)
    return p


def _split_overrides(extra) -> dict:
    """Turn leftover ``--dotted.key value`` tokens into a dict."""
    out = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise UsageError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise UsageError(f"missing value for {tok}")
            value = extra[i + 1]
            i += 2
        if key not in DEFAULTS:
            raise UsageError(f"unknown option {tok!r}")
        out[key] = value
    return out


def _resolve(args, extra, base=None) -> RunConfig:
    overrides = _split_overrides(extra)
    for flag, key in ALIASES.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    if "data.manifest" in overrides and "data.synthetic" not in overrides:
        overrides["data.synthetic"] = ""
    if getattr(args, "seed", None) is not None:
        for key in SEED_KEYS:
            overrides.setdefault(key, args.seed)
    if base is not None:
        merged = dict(base)
        if getattr(args, "config", None):
            merged.update(read_config_file(args.config))
        merged.update(overrides)
        return RunConfig.load(None, merged)
    return RunConfig.load(getattr(args, "config", None), overrides)


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------


def load_data(cfg: RunConfig):
    """(train scenes, test scenes, units) for the configured data source."""
    if cfg["data.synthetic"]:
        common = dict(scenario=cfg["data.synthetic"], noise_sigma=cfg["data.noise_sigma"])
        tr = generate(SyntheticSpec(n_scenes=cfg["data.n_scenes"], seed=cfg["data.seed"], **common))
        te = generate(SyntheticSpec(n_scenes=cfg["data.n_test"], seed=cfg["data.seed"] + 1000, **common))
        return tr.scenes, te.scenes, "meters", te
    if not cfg["data.manifest"]:
        raise ConfigError("no data source: set data.manifest or data.synthetic")
    path = Path(cfg["data.manifest"])
    if not path.exists():
        raise DataError(f"data path not found: {path}")
    train_s, test_s, manifest = load_split(path, cfg["data.mode"])
    return train_s, test_s, manifest.units, None


def _run_of(checkpoint) -> Path:
    ckpt = Path(checkpoint)
    if not ckpt.exists():
        raise DataError(f"checkpoint not found: {ckpt}")
    return ckpt.parent.parent if ckpt.parent.name == "checkpoints" else ckpt.parent


def _load_model(checkpoint):
    run = _run_of(checkpoint)
    snap = run / "config.snapshot"
    if not snap.exists():
        raise DataError(f"no config.snapshot next to checkpoint (looked in {run})")
    cfg = RunConfig.load(snap)
    model = LBEBM(cfg.model_config())
    params = model.init_params(cfg["train.seed"])
    loaded = nx.load_checkpoint(checkpoint)
    if loaded.names() != params.names() or any(
        loaded.value(n).shape != params.value(n).shape for n in params.names()
    ):
        raise DataError(f"checkpoint {checkpoint} does not match the model in {snap}")
    return model, loaded, cfg, run


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_train(args, extra) -> int:
    from .plotting import plot_training

    cfg = _resolve(args, extra)
    train_s, _, units, _ = load_data(cfg)
    cfg.set("data.units", units)
    if not train_s:
        raise DataError("no training windows found")
    run = Path(cfg["run.dir"])
    run.mkdir(parents=True, exist_ok=True)
    (run / "samples").mkdir(exist_ok=True)
    cfg.write(run / "config.snapshot")
    model = LBEBM(cfg.model_config())
    log.info("training %s on %d scenes for %d epochs", cfg["ablation"], len(train_s), cfg["train.epochs"])
    result = train(train_s, model, cfg.train_config(), run_dir=run)
    plot_training(result.history, run / "training.png")
    if result.history:
        last = result.history[-1]
        print(" ".join(f"{c}={last[c]:.4f}" if c != "epoch" else f"epoch={last[c]}" for c in METRIC_COLUMNS))
    print(f"run directory: {run}")
    return 0


def cmd_evaluate(args, extra) -> int:
    from .plotting import plot_errors

    if args.predictor == "model":
        if not args.checkpoint:
            raise UsageError("--checkpoint is required with the model predictor")
        model, params, snap, run = _load_model(args.checkpoint)
        cfg = _resolve(args, extra, base=_data_free(snap))
        model_units = snap["data.units"]
        predictor = ModelPredictor(model, params, cfg.langevin_config(), snap["pool.d"])
    else:
        run = _run_of(args.checkpoint) if args.checkpoint else Path(args.out or ".")
        base = _data_free(RunConfig.load(run / "config.snapshot")) if (run / "config.snapshot").exists() else None
        cfg = _resolve(args, extra, base=base)
        model_units = None
        predictor = PREDICTORS[args.predictor]
    _, test_s, units, _ = load_data(cfg)
    if model_units is not None and model_units != units:
        raise DataError(f"checkpoint was trained in {model_units}, dataset is in {units}")
    report = run_benchmark(test_s, predictor, k=cfg["eval.k"], seed=cfg["eval.seed"], units=units,
                           with_nll=cfg["eval.nll"], independent=cfg["eval.independent_minima"])
    out = Path(args.out) if args.out else run / "eval"
    out.mkdir(parents=True, exist_ok=True)
    (out / "scenes.csv").write_text(report.to_csv())
    s = report.overall.summary()
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["ade", "fde", "k", "nll", "units", "predictor"])
        w.writerow([repr(s["ade"]), repr(s["fde"]), s["k"], "" if s["nll"] is None else repr(s["nll"]),
                    s["units"], args.predictor])
    (out / "summary.json").write_text(report.to_json() + "\n")
    plot_errors(report, out / "errors.png")
    print(report.to_json() if args.json else report.summary_text())
    return 0


def _data_free(cfg: RunConfig) -> dict:
    """Snapshot values minus run/seed keys the caller is expected to choose."""
    return {k: v for k, v in cfg.items() if k != "run.dir"}


def _select_scene(scenes, selector):
    for s in scenes:
        if s.scene_id == selector:
            return s
    try:
        idx = int(selector)
    except ValueError:
        idx = None
    if idx is not None and 0 <= idx < len(scenes):
        return scenes[idx]
    raise DataError(f"scene {selector!r} not found among {len(scenes)} test scenes")


def sample_rows(scene, samples):
    """CSV rows (sample_id, agent_id, t, x, y, kind); sample_id is -1 for past/truth."""
    past, truth = scene.raw_past(), scene.raw_future()
    t_past = past.shape[1]
    ids = scene.agent_ids or tuple(range(scene.n))
    rows = []
    for i, a in enumerate(ids):
        rows += [(-1, a, t, past[i, t, 0], past[i, t, 1], "past") for t in range(t_past)]
        rows += [(-1, a, t_past + t, truth[i, t, 0], truth[i, t, 1], "truth") for t in range(truth.shape[1])]
    for k, s in enumerate(samples):
        for i, a in enumerate(ids):
            rows += [(k, a, t_past + t, s[i, t, 0], s[i, t, 1], "pred") for t in range(s.shape[1])]
    return rows


def cmd_sample(args, extra) -> int:
    from .plotting import plot_scene, scene_svg

    model, params, snap, run = _load_model(args.checkpoint)
    cfg = _resolve(args, extra, base=_data_free(snap))
    _, test_s, units, _ = load_data(cfg)
    scene = _select_scene(test_s, args.scene)
    k = cfg["eval.k"]
    noise = NoiseStream(cfg["eval.seed"])
    if k > 0:
        samples = ModelPredictor(model, params, cfg.langevin_config(), snap["pool.d"])(scene, k, noise)
    else:
        samples = np.zeros((0,) + scene.future.shape)
    out = Path(args.out) if args.out else run / "samples"
    out.mkdir(parents=True, exist_ok=True)
    stem = scene.scene_id.replace("/", "_").replace("@", "_")
    with open(out / f"{stem}.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "agent_id", "t", "x", "y", "kind"])
        for r in sample_rows(scene, samples):
            w.writerow([r[0], r[1], r[2], repr(float(r[3])), repr(float(r[4])), r[5]])
    title = f"{scene.scene_id} ({k} samples)"
    (out / f"{stem}.svg").write_text(scene_svg(scene.raw_past(), scene.raw_future(), samples, title))
    plot_scene(scene.raw_past(), scene.raw_future(), samples, out / f"{stem}.png", title)
    print(f"wrote {out / stem}.csv/.svg/.png ({scene.n} agents, k={k})")
    return 0


def cmd_gradcheck(args, extra) -> int:
    if extra:
        raise UsageError(f"unexpected arguments {extra}")
    t0 = time.perf_counter()
    results = run_suite(args.scale, args.seed, args.inject_fault, args.tolerance,
                        conditions=("ebm-plan", "gaussian-plan", "ebm-no-plan"))
    ok = True
    for r in results:
        groups = sorted({n.rsplit(".", 2)[0] for n in r.report.max_rel_error})
        status = "PASS" if r.report.passed else "FAIL"
        ok &= r.report.passed
        print(f"[{status}] {r.name}  groups: {', '.join(groups)}")
        for line in r.report.lines():
            print("    " + line)
    print(f"gradcheck {'passed' if ok else 'FAILED'} (tolerance {args.tolerance:g}, "
          f"{time.perf_counter() - t0:.1f} s)")
    return 0 if ok else 3


def cmd_synth(args, extra) -> int:
    if extra:
        raise UsageError(f"unexpected arguments {extra}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    for part, n, seed in (("train", args.n_scenes, args.seed), ("test", args.n_test, args.seed + 1000)):
        world = generate(SyntheticSpec(args.scenario, n, noise_sigma=args.noise_sigma, seed=seed))
        files[part] = f"{args.scenario}_{part}.txt"
        # gap=1 puts consecutive scenes exactly one window apart
        write_trajectory_file(out / files[part], to_tracks(world, gap=1))
    manifest = out / f"{args.scenario}.manifest"
    manifest.write_text(f"name = {args.scenario}\nunits = meters\n"
                        f"train = {files['train']}\ntest = {files['test']}\n")
    print(f"wrote {manifest}")
    return 0


COMMANDS = {"train": cmd_train, "evaluate": cmd_evaluate, "sample": cmd_sample,
            "gradcheck": cmd_gradcheck, "synth": cmd_synth}


def main(argv=None) -> int:
    parser = _parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:  # argparse usage errors exit with 2; remap to 1
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args, extra)
    except LBEBMError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())

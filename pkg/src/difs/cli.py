"""Campaign runner: ``difs {mc,difs,cem2,eval,analyze,repro-toy}``.

Every subcommand writes into a run directory (``--out``).  The directory holds
the post-defaulting ``config.json``; ``difs``/``cem2`` add ``progress.jsonl``,
``model.ckpt`` and ``dataset.bin``; ``eval`` adds ``metrics.json`` and
``final_samples.bin``; ``analyze`` adds ``pca/*.csv``; ``mc`` writes
``ground_truth.csv``.  Exit codes: 0 success, 2 config error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import copy
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .analysis import export_all, mode_split, pca
from .baselines import CemConfig, Gmm, cem_run, gmm_sample
from .core import SeededRng
from .denoiser import load_checkpoint, save_checkpoint
from .diffusion import make_schedule, sample
from .difs import DifsConfig, difs_run
from .envs import ENVIRONMENTS, make_env
from .metrics import evaluate, load_ground_truth, mc_ground_truth, save_ground_truth, toy_ground_truth
from .runs import read_dataset, write_dataset

log = logging.getLogger("difs")

DEFAULTS = {
    "env": "toy",
    "seed": 0,
    "difs": {f.name: f.default if f.default is not dataclasses.MISSING else f.default_factory()
             for f in dataclasses.fields(DifsConfig) if f.name != "seed"},
    "cem2": {f.name: f.default for f in dataclasses.fields(CemConfig) if f.name != "seed"},
    "metrics": {"k": 5, "n_eval": 1000},
    "ground_truth": {"n_failures": 1000, "max_draws": 20_000_000, "path": None},
    "analysis": {"n_components": 2},
}

_U64 = 2**64 - 1


class ConfigError(ValueError):
    pass


def _check_type(name: str, value, default):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, list):
        ok = isinstance(value, list) and all(isinstance(v, int) and not isinstance(v, bool) and v > 0 for v in value)
    elif default is None:
        ok = value is None or isinstance(value, str)
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(f"config field '{name}': unexpected value {value!r}")
    return float(value) if isinstance(default, float) else value


def _merge(defaults: dict, user: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(defaults)
    for key, value in user.items():
        name = prefix + key
        if key not in defaults:
            raise ConfigError(f"config field '{name}': unknown field")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config field '{name}': expected an object")
            out[key] = _merge(defaults[key], value, name + ".")
        else:
            out[key] = _check_type(name, value, defaults[key])
    return out


def resolve_config(user: dict, seed: int | None = None) -> dict:
    """Fill defaults, apply the ``--seed`` override and validate every section."""
    if not isinstance(user, dict):
        raise ConfigError("config must be a JSON object")
    cfg = _merge(DEFAULTS, user)
    if seed is not None:
        cfg["seed"] = seed
    if not 0 <= cfg["seed"] <= _U64:
        raise ConfigError(f"config field 'seed': must be an unsigned 64-bit integer, got {cfg['seed']}")
    if cfg["env"] not in ENVIRONMENTS:
        raise ConfigError(f"config field 'env': unknown environment {cfg['env']!r}")
    for section, cls in (("difs", DifsConfig), ("cem2", CemConfig)):
        try:
            cls(**cfg[section], seed=cfg["seed"])
        except ValueError as exc:
            raise ConfigError(f"config section '{section}': {exc}") from None
    for key in ("k", "n_eval"):
        if cfg["metrics"][key] < 1:
            raise ConfigError(f"config field 'metrics.{key}': must be positive")
    for key in ("n_failures", "max_draws"):
        if cfg["ground_truth"][key] < 1:
            raise ConfigError(f"config field 'ground_truth.{key}': must be positive")
    if cfg["analysis"]["n_components"] < 1:
        raise ConfigError("config field 'analysis.n_components': must be positive")
    return cfg


def load_config(path, seed: int | None = None) -> dict:
    user = {}
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    return resolve_config(user, seed)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _ground_truth_path(cfg: dict, out: Path) -> Path:
    return Path(cfg["ground_truth"]["path"]) if cfg["ground_truth"]["path"] else out / "ground_truth.csv"


def cmd_mc(cfg: dict, out: Path, threads: int) -> None:
    path = _ground_truth_path(cfg, out)
    env = make_env(cfg["env"])
    gcfg = cfg["ground_truth"]
    if path.exists():
        gt = load_ground_truth(path)
        if (gt.env_name, gt.seed, gt.features.shape[0]) == (env.name, cfg["seed"], gcfg["n_failures"]):
            log.info("reusing cached ground truth %s", path)
            return
    rng = SeededRng(cfg["seed"]).child("ground-truth")
    if env.name == "toy":
        gt = toy_ground_truth(gcfg["n_failures"], rng)
    else:
        gt = mc_ground_truth(env, gcfg["n_failures"], gcfg["max_draws"], rng)
    if gt.zero_failures:
        log.warning("ground truth for %s found no failures in %d draws", env.name, gt.draws)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_ground_truth(path, gt)


def _write_progress(out: Path, records) -> None:
    with open(out / "progress.jsonl", "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def cmd_difs(cfg: dict, out: Path, threads: int) -> None:
    env = make_env(cfg["env"])
    config = DifsConfig(**cfg["difs"], seed=cfg["seed"])
    art = difs_run(config, env, SeededRng(cfg["seed"]).child("difs"), threads)
    _write_progress(out, art.progress)
    provenance = {"method": "difs", "env": env.name, "seed": cfg["seed"], "r_fail": env.r_fail,
                  "conditional": config.conditional, "ablation_condition": config.ablation_condition,
                  "converged_iteration": art.converged_iteration}
    save_checkpoint(out / "model.ckpt", art.model, art.schedule, provenance)
    write_dataset(out / "dataset.bin", art.dataset_x, art.dataset_r)


def cmd_cem2(cfg: dict, out: Path, threads: int) -> None:
    env = make_env(cfg["env"])
    config = CemConfig(**cfg["cem2"], seed=cfg["seed"])
    art = cem_run(config, env, SeededRng(cfg["seed"]).child("cem2"))
    _write_progress(out, art.progress)
    _write_json(out / "model.ckpt", {**art.model.to_dict(), "provenance": {
        "method": "cem2", "env": env.name, "seed": cfg["seed"], "converged_iteration": art.converged_iteration}})
    write_dataset(out / "dataset.bin", art.dataset_x, art.dataset_r)


def load_sampler(out: Path):
    """Rebuild ``(method, sampler, provenance)`` from ``model.ckpt`` in a run directory."""
    path = out / "model.ckpt"
    if not path.exists():
        raise FileNotFoundError(f"{path}: no trained model; run 'difs' or 'cem2' first")
    head = json.loads(path.read_text())
    if head.get("format") == "difs-gmm":
        g = Gmm.from_dict(head)
        return "cem2", (lambda n, rng, threads=1: gmm_sample(g, n, rng)), head.get("provenance", {})
    params, sched, prov = load_checkpoint(path)
    schedule = make_schedule(sched["K"], sched["beta_min"], sched["beta_max"])
    cond = prov.get("r_fail", 0.0) if prov.get("conditional", True) else prov.get("ablation_condition", 0.0)
    return "difs", (lambda n, rng, threads=1: sample(params, schedule, cond, n, rng, threads)), prov


def cmd_eval(cfg: dict, out: Path, threads: int) -> None:
    gt_path = _ground_truth_path(cfg, out)
    if not gt_path.exists():
        raise ConfigError(f"no ground truth at {gt_path}; run 'mc' first or set ground_truth.path")
    gt = load_ground_truth(gt_path)
    env = make_env(cfg["env"])
    if gt.env_name != env.name:
        raise ConfigError(f"ground truth at {gt_path} is for '{gt.env_name}', not '{env.name}'")
    method, sampler, prov = load_sampler(out)
    n_eval, k = cfg["metrics"]["n_eval"], cfg["metrics"]["k"]
    rng = SeededRng(cfg["seed"]).child("eval")
    x = sampler(n_eval, rng, threads)
    write_dataset(out / "final_samples.bin", x, env.robustness(x))
    report = evaluate(env, gt, lambda n, r, t: x, n_eval, k, rng, method, cfg["seed"], threads)
    report.notes["converged_iteration"] = prov.get("converged_iteration")
    (out / "metrics.json").write_text(report.to_json())


def cmd_analyze(cfg: dict, out: Path, threads: int, strict: bool = True) -> None:
    path = out / "final_samples.bin"
    if path.exists():
        x, r = read_dataset(path)
    else:
        _, sampler, _ = load_sampler(out)
        x = sampler(cfg["metrics"]["n_eval"], SeededRng(cfg["seed"]).child("eval"), threads)
        r = make_env(cfg["env"]).robustness(x)
    fail = r <= make_env(cfg["env"]).r_fail
    n_comp = cfg["analysis"]["n_components"]
    if fail.sum() <= n_comp:
        msg = f"only {int(fail.sum())} failing samples; PCA needs more than {n_comp}"
        if strict:
            raise RuntimeError(msg)
        log.warning("analyze skipped: %s", msg)
        (out / "pca").mkdir(exist_ok=True)
        _write_json(out / "pca" / "summary.json", {"n_failures": int(fail.sum()), "error": msg})
        return
    res = pca(x[fail], n_comp)
    export_all(out / "pca", res, r[fail], fail[fail])
    summary = {"n_failures": int(fail.sum()), "explained_fraction": res.explained_fraction.tolist(),
               "degenerate": res.degenerate}
    try:
        split = mode_split(res.projections)
        summary.update(separation=split.separation, mode_sizes=[int(split.first.size), int(split.second.size)])
    except ValueError as exc:
        summary["mode_split_error"] = str(exc)
    _write_json(out / "pca" / "summary.json", summary)


def cmd_repro_toy(cfg: dict, out: Path, threads: int) -> None:
    cfg["env"] = "toy"
    _write_json(out / "config.json", cfg)
    for step in (cmd_mc, cmd_difs, cmd_eval):
        step(cfg, out, threads)
    cmd_analyze(cfg, out, threads, strict=False)


COMMANDS = {
    "mc": cmd_mc,
    "difs": cmd_difs,
    "cem2": cmd_cem2,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "repro-toy": cmd_repro_toy,
}


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v <= _U64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="difs", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="JSON config; omitted fields take defaults")
    p.add_argument("--seed", type=_u64, help="master seed, overrides the config")
    p.add_argument("--threads", type=_positive, default=1, help="rollout/sampling threads (results do not depend on it)")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        if args.command != "repro-toy":
            _write_json(out / "config.json", cfg)
        COMMANDS[args.command](cfg, out, args.threads)
    except ConfigError as exc:
        print(f"difs: config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - any failure maps to exit 3
        log.debug("run failed", exc_info=True)
        print(f"difs: {args.command} failed: {exc}", file=sys.stderr)
        return 3
    return 0


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()

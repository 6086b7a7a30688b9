"""Command-line interface: dataset generation, training, evaluation,
ablation sweeps, and the occlusion stress test.

Every command takes an optional ``--config FILE`` plus ``--set key=value``
overrides, writes its artifacts atomically, and drops the exact resolved
configuration next to them. Exit codes: 0 success, 1 validation error,
2 runtime failure; errors are single ``error: <category>: <message>``
lines on stderr.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, config_hash, load_run_config, resolved_text
from .dataset import atomic_write_text, load_dataset, save_dataset
from .errors import ConfigError
from .experiments import (
    evaluate_anomaly,
    evaluate_occlusion,
    generate_clear_episodes,
    occlusion_stress_test,
    run_ablation,
)
from .fusion import FusionModel
from .training import train
from .world import simulate_episode

__all__ = ["main"]

REPORT_DIR_ENV = "LOOKOUT_REPORT_DIR"


class _CliValidationError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports validation problems our way (exit code 1)."""

    def error(self, message):
        raise _CliValidationError(message)


def _parse_overrides(pairs: list[str] | None) -> dict[str, str]:
    overrides = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        overrides[key.strip()] = value.strip()
    return overrides


def _load_config(args, extra_overrides: dict[str, str] | None = None) -> RunConfig:
    overrides = _parse_overrides(getattr(args, "set", None))
    overrides.update(extra_overrides or {})
    return load_run_config(getattr(args, "config", None), overrides)


def _out_dir(args, required: bool = True) -> Path | None:
    out = getattr(args, "out", None) or os.environ.get(REPORT_DIR_ENV)
    if out is None:
        if required:
            raise ConfigError("an output directory is required (--out or $" + REPORT_DIR_ENV + ")")
        return None
    return Path(out)


def _write_resolved(directory: Path, config: RunConfig) -> None:
    atomic_write_text(directory / "resolved.cfg", resolved_text(config))


def _write_json(path: Path, payload) -> None:
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _dataset_world_overrides(args, config: RunConfig, manifest_world) -> RunConfig:
    """Datasets carry their own world config; explicit conflicts are errors."""
    for key in config.provided:
        if not key.startswith("world."):
            continue
        field = key.split(".", 1)[1]
        if getattr(config.world, field) != getattr(manifest_world, field):
            raise ConfigError(
                f"{key} conflicts with the dataset manifest "
                f"({getattr(config.world, field)!r} vs {getattr(manifest_world, field)!r})"
            )
    return dataclasses.replace(config, world=manifest_world)


def _split_episodes(episodes, test_fraction: float):
    n_test = max(1, int(round(len(episodes) * test_fraction)))
    if n_test >= len(episodes):
        raise ConfigError(
            f"dataset too small to split: {len(episodes)} episodes, test fraction {test_fraction}"
        )
    return episodes[:-n_test], episodes[-n_test:]


def _rebuild_model(config: RunConfig, checkpoint_path: Path) -> FusionModel:
    ck = load_checkpoint(checkpoint_path)
    expected = config_hash(config)
    if ck.config_hash != expected:
        raise ConfigError(
            f"checkpoint config hash {ck.config_hash[:12]} does not match the resolved "
            f"config {expected[:12]}; pass the resolved.cfg written next to the checkpoint"
        )
    model = FusionModel(config.world, variant=config.train.variant, seed=config.train.seed)
    model.store.load_values(ck.params)
    return model


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    overrides = {}
    if args.seed is not None:
        overrides["world.rng_seed"] = str(args.seed)
    if args.episodes is not None:
        overrides["run.episodes"] = str(args.episodes)
    config = _load_config(args, overrides)
    out = Path(args.out)
    base = config.world.rng_seed
    episodes = [
        simulate_episode(dataclasses.replace(config.world, rng_seed=base + i))
        for i in range(config.run.episodes)
    ]
    save_dataset(out, episodes, config.world)
    _write_resolved(out, config)
    print(f"wrote {len(episodes)} episodes ({sum(len(e.frames) for e in episodes)} frames) to {out}")
    return 0


def cmd_train(args) -> int:
    overrides = {}
    if args.seed is not None:
        overrides["train.seed"] = str(args.seed)
    if args.epochs is not None:
        overrides["train.epochs"] = str(args.epochs)
    if args.variant is not None:
        overrides["train.variant"] = args.variant
    config = _load_config(args, overrides)
    episodes, manifest_world = load_dataset(args.data)
    config = _dataset_world_overrides(args, config, manifest_world)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_resolved(out, config)

    log_lines = []
    t0 = time.time()

    def progress(epoch, breakdown):
        line = {"epoch": epoch, "wall_time": time.time() - t0, **breakdown.to_dict()}
        log_lines.append(json.dumps(line, sort_keys=True))
        print(f"epoch {epoch:3d}  total {breakdown.total:.4f}", file=sys.stderr)

    result = train(config.train, episodes, progress=progress)
    chash = config_hash(config)
    meta = {
        "variant": config.train.variant,
        "epochs": config.train.epochs,
        "best_epoch": result.best_epoch,
    }
    save_checkpoint(out / "checkpoint.bin", result.final_values, chash, adam=result.adam, meta=meta)
    save_checkpoint(out / "checkpoint_best.bin", result.best_values, chash, meta=meta)
    atomic_write_text(out / "train_log.jsonl", "\n".join(log_lines) + "\n")
    print(f"trained {config.train.variant} for {config.train.epochs} epochs -> {out}")
    return 0


def cmd_eval(args) -> int:
    config = _load_config(args)
    episodes, manifest_world = load_dataset(args.data)
    config = _dataset_world_overrides(args, config, manifest_world)
    out = _out_dir(args)
    model = _rebuild_model(config, Path(args.checkpoint))
    report = evaluate_anomaly(model, episodes)
    occ = evaluate_occlusion(model, episodes)
    out.mkdir(parents=True, exist_ok=True)
    payload = {"anomaly": report.to_dict(), "occlusion": occ, "episodes": len(episodes)}
    _write_json(out / "metrics.json", payload)
    _write_resolved(out, config)
    print(json.dumps(payload["anomaly"], sort_keys=True))
    return 0


def cmd_ablate(args) -> int:
    overrides = {}
    if args.variants is not None:
        overrides["run.variants"] = args.variants
    if args.seeds is not None:
        overrides["run.seeds"] = args.seeds
    if args.epochs is not None:
        overrides["train.epochs"] = str(args.epochs)
    config = _load_config(args, overrides)
    episodes, manifest_world = load_dataset(args.data)
    config = _dataset_world_overrides(args, config, manifest_world)
    out = _out_dir(args)
    train_eps, test_eps = _split_episodes(episodes, config.run.test_fraction)

    def progress(variant, seed, metrics):
        print(f"{variant} seed {seed}: pr_auc {metrics.pr_auc:.4f} f1 {metrics.f1:.4f}", file=sys.stderr)

    report, _ = run_ablation(
        config.train, train_eps, test_eps,
        list(config.run.variants), list(config.run.seeds),
        progress=progress,
    )
    out.mkdir(parents=True, exist_ok=True)
    payload = report.to_dict()
    payload["train_episodes"] = len(train_eps)
    payload["test_episodes"] = len(test_eps)
    _write_json(out / "ablation.json", payload)
    _write_resolved(out, config)
    print(json.dumps(payload["summary"], sort_keys=True))
    return 0


def cmd_stress(args) -> int:
    overrides = {}
    if args.k is not None:
        overrides["run.stress_k"] = str(args.k)
    if args.episodes is not None:
        overrides["run.stress_episodes"] = str(args.episodes)
    if args.seed is not None:
        overrides["world.rng_seed"] = str(args.seed)
    config = _load_config(args, overrides)
    out = _out_dir(args)
    model = _rebuild_model(config, Path(args.checkpoint))
    base = config.world.rng_seed
    episodes = generate_clear_episodes(
        config.world, [base + 1000 + i for i in range(config.run.stress_episodes)]
    )
    rows = []
    for ep in episodes:
        rep = occlusion_stress_test(
            model, ep, k=config.run.stress_k, rng=np.random.default_rng([ep.seed, 17])
        )
        rows.append({"episode_seed": ep.seed, **rep.to_dict()})
    fp_rate = float(np.mean([r["false_positive"] for r in rows])) if rows else 0.0
    payload = {
        "k": config.run.stress_k,
        "episodes": len(rows),
        "false_positive_rate": fp_rate,
        "mean_max_prob": float(np.mean([r["max_prob"] for r in rows])) if rows else 0.0,
        "rows": rows,
    }
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "stress.json", payload)
    _write_resolved(out, config)
    print(json.dumps({k: payload[k] for k in ("k", "episodes", "false_positive_rate", "mean_max_prob")}, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> _Parser:
    parser = _Parser(prog="lookout", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", type=str, default=None, help="config file (key = value lines)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")

    p = sub.add_parser("gen-data", help="generate a labeled synthetic dataset")
    common(p)
    p.add_argument("--out", required=True, help="dataset directory to create")
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--seed", type=int, default=None, help="base world seed")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model variant on a dataset")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory for checkpoints")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--variant", type=str, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default=None, help=f"report directory (or ${REPORT_DIR_ENV})")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate variant x seed combinations")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--variants", type=str, default=None, help="comma-separated variant names")
    p.add_argument("--seeds", type=str, default=None, help="comma-separated integer seeds")
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("stress", help="inject total occlusion into clear episodes")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--k", type=int, default=None, help="occluded trailing frames")
    p.add_argument("--episodes", type=int, default=None, help="number of clear episodes")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_stress)

    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except _CliValidationError as exc:
        print(f"error: validation: {exc}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, _CliValidationError) as exc:
        print(f"error: validation: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports and exits
        print(f"error: runtime: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

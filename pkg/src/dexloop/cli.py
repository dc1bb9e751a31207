"""Command-line entry point for the whole workflow.

Every subcommand resolves one config (defaults merged with --config) and
writes a run manifest next to its outputs, so a finished run directory is
self-describing. Progress goes to stderr; results live in files only.

Exit codes: 0 success, 2 config/usage error, 3 runtime failure.
"""

from __future__ import annotations

import json
import sys
import time
from pathlib import Path

import click
import numpy as np

from . import __version__
from .config import ConfigError, default_config_text, experiment_config, load_config, loop_config
from .experiment import rerender_report, run_experiment
from .loop import (
    LoopConfig,
    collect_demos,
    corrective_round,
    evaluate_policy,
    hil_round,
    make_review_source,
    run_rollout,
    _retrain,
)
from .policy import load_policy, save_policy
from .simenv import Difficulty, Task, TaskSpec
from .store import DatasetManifest, EpisodeStore, export_bundle, load_dataset


def _echo(msg: str) -> None:
    click.echo(msg, err=True)


def write_run_manifest(run_dir: Path, cfg: dict, command: str,
                       seeds: list[int]) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "version": f"dexloop-{__version__}",
        "config": cfg,
        "seeds": seeds,
        "created_s": int(time.time()),
    }
    (run_dir / "run.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


@click.group()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              default=None, help="TOML config overriding the shipped defaults.")
@click.version_option(version=__version__)
@click.pass_context
def cli(ctx, config_path):
    """Uncertainty-guided corrective imitation learning, desk scale."""
    ctx.ensure_object(dict)
    ctx.obj["config"] = load_config(config_path)
    ctx.obj["config_path"] = config_path


@cli.group()
def demo():
    """Demonstration collection."""


@demo.command("collect")
@click.option("--task", type=click.Choice([t.value for t in Task]), required=True)
@click.option("--n", type=int, default=None, help="Demo count (default from config).")
@click.option("--noise", type=float, default=None, help="Expert action noise.")
@click.option("--seed", type=int, default=0)
@click.option("--run-dir", type=click.Path(), required=True)
@click.pass_context
def demo_collect(ctx, task, n, noise, seed, run_dir):
    """Collect scripted-expert demos through the full retargeting path."""
    cfg = ctx.obj["config"]
    lcfg = loop_config(cfg)
    n = n if n is not None else lcfg.initial_demos
    noise = noise if noise is not None else lcfg.demo_noise
    run_dir = Path(run_dir)
    store = EpisodeStore(run_dir / "episodes")
    manifest = DatasetManifest()
    _echo(f"collecting {n} demos for {task} (noise {noise}, seed {seed})")
    ledger = collect_demos(TaskSpec(Task(task)), n, noise, store, manifest,
                           seed_base=seed * 100_000)
    store.save_manifest(manifest)
    write_run_manifest(run_dir, cfg, "demo collect", [seed])
    _echo(f"done: {manifest.total_samples} samples, "
          f"{ledger.attention_frames} attention frames")


@cli.command()
@click.option("--backend", type=click.Choice(["bc", "ddpm"]), default=None)
@click.option("--epochs", type=int, default=None)
@click.option("--seed", type=int, default=0)
@click.option("--run-dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--manifest", "manifest_name", default="manifest.json")
@click.option("--out", "out_name", default="policy.vdgp")
@click.pass_context
def train(ctx, backend, epochs, seed, run_dir, manifest_name, out_name):
    """Train a policy on the run directory's current manifest."""
    cfg = ctx.obj["config"]
    lcfg = loop_config(cfg)
    if backend is not None or epochs is not None:
        lcfg = LoopConfig(**{**lcfg.__dict__,
                             **({"backend": backend} if backend else {}),
                             **({"epochs": epochs} if epochs is not None else {})})
    run_dir = Path(run_dir)
    store = EpisodeStore(run_dir / "episodes")
    manifest = store.load_manifest(manifest_name)
    _echo(f"training {lcfg.backend} for {lcfg.epochs} epochs "
          f"on {manifest.total_samples} samples")
    policy = _retrain(manifest, store, lcfg, seed)
    save_policy(policy, run_dir / out_name)
    store.save_manifest(manifest, manifest_name)
    status = {"round": 0, "dataset_samples": manifest.total_samples,
              "loss_curve": policy.loss_curve, "state": "done"}
    (run_dir / "training_status.json").write_text(json.dumps(status))
    write_run_manifest(run_dir, cfg, "train", [seed])
    _echo(f"saved {run_dir / out_name}")


@cli.command()
@click.option("--task", type=click.Choice([t.value for t in Task]), required=True)
@click.option("--difficulty", type=click.Choice([d.value for d in Difficulty]),
              default="default")
@click.option("--n", type=int, default=20)
@click.option("--score/--no-score", default=False)
@click.option("--seed", type=int, default=0)
@click.option("--run-dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--policy", "policy_name", default="policy.vdgp")
@click.pass_context
def rollout(ctx, task, difficulty, n, score, seed, run_dir, policy_name):
    """Evaluation or scored rollouts with a trained policy."""
    cfg = ctx.obj["config"]
    lcfg = loop_config(cfg)
    run_dir = Path(run_dir)
    policy = load_policy(run_dir / policy_name)
    store = EpisodeStore(run_dir / "episodes")
    spec = TaskSpec(Task(task), Difficulty(difficulty))
    from .simenv import evaluate_episode
    successes = 0
    for i in range(n):
        record, trace, eid = run_rollout(policy, spec, seed * 100_000 + i, lcfg,
                                         score=score, store=store)
        outcome = evaluate_episode(spec.task, record.states)
        successes += outcome.task_success
        _echo(f"rollout {i}: success={outcome.task_success} steps={record.steps}"
              + (f" peak_u={float(trace.u.max()):.2e}" if trace is not None else ""))
    write_run_manifest(run_dir, cfg, "rollout", [seed])
    _echo(f"success rate {successes}/{n}")


@cli.command("round")
@click.option("--mode", type=click.Choice(["bc", "hil", "corrective"]), required=True)
@click.option("--review", type=click.Choice(["oracle", "human"]), default="oracle")
@click.option("--task", type=click.Choice([t.value for t in Task]), required=True)
@click.option("--seed", type=int, default=0)
@click.option("--round-index", type=int, default=1)
@click.option("--run-dir", type=click.Path(), required=True)
@click.option("--policy", "policy_name", default="policy.vdgp")
@click.pass_context
def round_cmd(ctx, mode, review, task, seed, round_index, run_dir, policy_name):
    """One supervision round of the chosen regime."""
    cfg = ctx.obj["config"]
    lcfg = loop_config(cfg)
    run_dir = Path(run_dir)
    store = EpisodeStore(run_dir / "episodes")
    task_enum = Task(task)
    if mode == "bc":
        manifest = DatasetManifest()
        collect_demos(TaskSpec(task_enum), lcfg.initial_demos, lcfg.demo_noise,
                      store, manifest, seed_base=seed * 100_000,
                      round_index=round_index)
        policy = _retrain(manifest, store, lcfg, seed)
    else:
        manifest = store.load_manifest()
        policy = load_policy(run_dir / policy_name)
        if mode == "corrective":
            policy, report = corrective_round(
                policy, store, manifest, task_enum, lcfg, round_index,
                review=make_review_source(review), train_seed=seed,
                rollout_seed_base=seed * 100_000 + round_index * 10_000)
        else:
            policy, report = hil_round(
                policy, store, manifest, task_enum, lcfg, round_index,
                train_seed=seed,
                rollout_seed_base=seed * 100_000 + round_index * 10_000)
        (run_dir / f"round_{mode}_{round_index}.json").write_text(
            json.dumps(report.to_dict(), indent=2, sort_keys=True, default=str))
    store.save_manifest(manifest)
    save_policy(policy, run_dir / policy_name)
    write_run_manifest(run_dir, cfg, f"round {mode}", [seed])
    _echo(f"round complete; dataset {manifest.total_samples} samples")


@cli.command()
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.pass_context
def experiment(ctx, out_dir):
    """Full multi-round, multi-seed comparison (the headline protocol)."""
    cfg = ctx.obj["config"]
    ecfg = experiment_config(cfg)
    out_dir = Path(out_dir)
    write_run_manifest(out_dir, cfg, "experiment", list(ecfg.seeds))
    report = run_experiment(ecfg, out_dir, progress=_echo)
    _echo(f"finished in {report['wall_clock_s']:.0f}s; report in {out_dir}")


@cli.command()
@click.option("--http-port", type=int, default=None)
@click.option("--udp-port", type=int, default=None)
@click.option("--run-dir", type=click.Path(), required=True)
@click.pass_context
def serve(ctx, http_port, udp_port, run_dir):
    """Start the control and data planes for the review console."""
    cfg = ctx.obj["config"]
    net = cfg["net"]
    from .server import serve as serve_planes
    _echo(f"control plane on :{http_port or net['http_port']}, "
          f"data plane on :{udp_port or net['udp_port']}")
    serve_planes(run_dir, http_port or net["http_port"],
                 udp_port or net["udp_port"], net["host"])


@cli.command()
@click.option("--run-dir", type=click.Path(exists=True, file_okay=False), required=True)
def report(run_dir):
    """Re-emit metrics tables and the effort comparison from run logs."""
    table = rerender_report(run_dir)
    _echo(table)


@cli.command()
@click.option("--run-dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
def export(run_dir, out_path):
    """Bundle a run directory into a single shareable archive."""
    path = export_bundle(run_dir, out_path)
    _echo(f"wrote {path}")


@cli.command("config")
def show_config():
    """Print the shipped default configuration."""
    click.echo(default_config_text())


def main() -> int:
    try:
        cli(standalone_mode=False)
        return 0
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except (click.UsageError, ConfigError) as exc:
        _echo(f"config error: {exc}")
        return 2
    except Exception as exc:  # runtime failure
        _echo(f"error: {exc}")
        return 3


if __name__ == "__main__":
    sys.exit(main())

"""Multi-round, multi-seed comparison of the three supervision regimes.

For every task and seed: collect demonstrations once, train the BC
baselines at each budget, then branch the corrective and HIL regimes off
the same 50-demo starting point for the configured number of relabeling
rounds. Every configuration is evaluated on freshly seeded parallel
environments at both difficulty levels, and attention effort is accounted
per collected sample. Corrective data is only ever collected at Default
difficulty; Hard rows therefore measure generalization of the learned
recovery behavior.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .loop import (
    EffortLedger,
    LoopConfig,
    collect_demos,
    corrective_round,
    evaluate_policy,
    hil_round,
    make_review_source,
    _retrain,
)
from .policy import save_policy
from .simenv import Difficulty, Task, TaskSpec
from .store import DatasetManifest, EpisodeStore

DIFFICULTIES = (Difficulty.DEFAULT, Difficulty.HARD)


@dataclass(frozen=True)
class ExperimentConfig:
    tasks: tuple[str, ...] = ("pan", "drawer", "valve")
    seeds: tuple[int, ...] = (0, 1, 2)
    bc_budgets: tuple[int, ...] = (50, 150)
    loop: LoopConfig = field(default_factory=LoopConfig)
    review_source: str = "oracle"

    def total_budget(self) -> int:
        return self.loop.initial_demos + self.loop.rounds * self.loop.corrective_per_round


def _eval_both(policy, task: Task, cfg: LoopConfig, seed: int) -> dict:
    out = {}
    for difficulty in DIFFICULTIES:
        task_sr, subtask_sr = evaluate_policy(
            policy, task, difficulty, cfg.eval_envs, cfg,
            seed_base=1_000_000 + seed * 4096)
        out[difficulty.value] = {"task_sr": task_sr, "subtask_sr": subtask_sr}
    return out


def run_experiment(cfg: ExperimentConfig, run_dir, progress=None, session=None) -> dict:
    """Execute the full protocol; returns and writes the report."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    log = progress or (lambda msg: None)
    loop_cfg = cfg.loop
    t_start = time.time()

    results: dict = {}
    efforts: dict = {}
    for task_name in cfg.tasks:
        task = Task(task_name)
        for seed in cfg.seeds:
            cell_dir = run_dir / task_name / f"seed{seed}"
            store = EpisodeStore(cell_dir / "episodes")
            log(f"[{task_name}/seed{seed}] collecting {max(cfg.bc_budgets)} demos")
            demo_manifest = DatasetManifest()
            demo_ledger = collect_demos(
                TaskSpec(task, Difficulty.DEFAULT), max(cfg.bc_budgets),
                loop_cfg.demo_noise, store, demo_manifest,
                seed_base=seed * 100_000, round_index=0)

            bc_policies = {}
            for budget in cfg.bc_budgets:
                manifest = DatasetManifest()
                manifest.entries = list(demo_manifest.entries[:budget])
                log(f"[{task_name}/seed{seed}] training bc-{budget}")
                policy = _retrain(manifest, store, loop_cfg, seed)
                bc_policies[budget] = policy
                store.save_manifest(manifest, f"bc{budget}.json")
                save_policy(policy, cell_dir / f"bc{budget}.vdgp")
                sr = _eval_both(policy, task, loop_cfg, seed)
                frames = sum(store.load(e.episode_id).steps
                             for e in manifest.entries)
                _record_cell(results, efforts, f"bc{budget}", task_name, seed, sr,
                             EffortLedger(demo_frames=frames, samples=budget))
                log(f"[{task_name}/seed{seed}] bc-{budget}: {sr}")

            for mode in ("corrective", "hil"):
                manifest = DatasetManifest()
                manifest.entries = list(demo_manifest.entries[:loop_cfg.initial_demos])
                policy = bc_policies[loop_cfg.initial_demos]
                ledger = EffortLedger()
                for rnd in range(1, loop_cfg.rounds + 1):
                    log(f"[{task_name}/seed{seed}] {mode} round {rnd}")
                    seed_base = seed * 100_000 + rnd * 10_000
                    if mode == "corrective":
                        review = make_review_source(cfg.review_source, session)
                        policy, report = corrective_round(
                            policy, store, manifest, task, loop_cfg, rnd,
                            review=review, train_seed=seed,
                            rollout_seed_base=seed_base)
                    else:
                        policy, report = hil_round(
                            policy, store, manifest, task, loop_cfg, rnd,
                            train_seed=seed, rollout_seed_base=seed_base)
                    ledger = ledger.merged(report.effort)
                store.save_manifest(manifest, f"{mode}.json")
                save_policy(policy, cell_dir / f"{mode}.vdgp")
                sr = _eval_both(policy, task, loop_cfg, seed)
                _record_cell(results, efforts, mode, task_name, seed, sr, ledger)
                log(f"[{task_name}/seed{seed}] {mode}: {sr}")

    report = {
        "config": {
            "tasks": list(cfg.tasks),
            "seeds": list(cfg.seeds),
            "bc_budgets": list(cfg.bc_budgets),
            "initial_demos": loop_cfg.initial_demos,
            "corrective_per_round": loop_cfg.corrective_per_round,
            "rounds": loop_cfg.rounds,
            "eval_envs": loop_cfg.eval_envs,
            "epochs": loop_cfg.epochs,
            "backend": loop_cfg.backend,
            "dt": 0.05,
        },
        "results": results,
        "effort": efforts,
        "wall_clock_s": time.time() - t_start,
    }
    write_report_files(report, run_dir)
    return report


def _record_cell(results, efforts, mode, task_name, seed, sr, ledger: EffortLedger):
    cell = results.setdefault(mode, {}).setdefault(task_name, {})
    for difficulty, metrics in sr.items():
        slot = cell.setdefault(difficulty, {"task_sr": {}, "subtask_sr": {}})
        slot["task_sr"][str(seed)] = metrics["task_sr"]
        slot["subtask_sr"][str(seed)] = metrics["subtask_sr"]
    eff = efforts.setdefault(mode, {}).setdefault(task_name, {})
    eff[str(seed)] = {
        "demo_frames": ledger.demo_frames,
        "review_frames": ledger.review_frames,
        "watched_frames": ledger.watched_frames,
        "correction_frames": ledger.correction_frames,
        "samples": ledger.samples,
        "frames_per_sample": ledger.per_sample(),
        "seconds_per_sample": ledger.per_sample() * 0.05,
    }


# ---------------------------------------------------------------------------
# report rendering
# ---------------------------------------------------------------------------

def _mean_std(values) -> tuple[float, float]:
    arr = np.array(list(values), dtype=float)
    return float(arr.mean()), float(arr.std())


def render_table(report: dict) -> str:
    """Plain-text success-rate table in the row-per-configuration layout."""
    results = report["results"]
    tasks = report["config"]["tasks"]
    out = io.StringIO()
    header = f"{'experiment':<14}"
    for task in tasks:
        for difficulty in ("default", "hard"):
            header += f" | {task}/{difficulty:<7} task%  sub%"
    out.write(header + "\n")
    out.write("-" * len(header) + "\n")
    for mode in sorted(results):
        line = f"{mode:<14}"
        for task in tasks:
            for difficulty in ("default", "hard"):
                cell = results[mode][task][difficulty]
                tm, ts = _mean_std(cell["task_sr"].values())
                sm, ss = _mean_std(cell["subtask_sr"].values())
                line += (f" | {100 * tm:5.1f}±{100 * ts:4.1f} "
                         f"{100 * sm:5.1f}±{100 * ss:4.1f}")
        out.write(line + "\n")
    out.write("\nattention effort (frames/sample, mean over seeds)\n")
    for mode in sorted(report["effort"]):
        vals = []
        for task in tasks:
            per_seed = report["effort"][mode][task]
            m, _ = _mean_std(v["frames_per_sample"] for v in per_seed.values())
            vals.append(f"{task}={m:7.1f}")
        out.write(f"{mode:<14} {'  '.join(vals)}\n")
    return out.getvalue()


def write_report_files(report: dict, run_dir) -> None:
    run_dir = Path(run_dir)
    (run_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    (run_dir / "table.txt").write_text(render_table(report))
    with open(run_dir / "results.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["mode", "task", "difficulty", "seed", "task_sr", "subtask_sr"])
        for mode, tasks in sorted(report["results"].items()):
            for task, diffs in sorted(tasks.items()):
                for difficulty, cell in sorted(diffs.items()):
                    for seed in sorted(cell["task_sr"]):
                        writer.writerow([mode, task, difficulty, seed,
                                         cell["task_sr"][seed],
                                         cell["subtask_sr"][seed]])
    with open(run_dir / "effort.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["mode", "task", "seed", "demo_frames", "review_frames",
                         "watched_frames", "correction_frames", "samples",
                         "frames_per_sample", "seconds_per_sample"])
        for mode, tasks in sorted(report["effort"].items()):
            for task, seeds in sorted(tasks.items()):
                for seed, eff in sorted(seeds.items()):
                    writer.writerow([mode, task, seed, eff["demo_frames"],
                                     eff["review_frames"], eff["watched_frames"],
                                     eff["correction_frames"], eff["samples"],
                                     eff["frames_per_sample"],
                                     eff["seconds_per_sample"]])


def rerender_report(run_dir) -> str:
    """Re-emit table/CSVs from a finished run's report.json."""
    run_dir = Path(run_dir)
    report = json.loads((run_dir / "report.json").read_text())
    write_report_files(report, run_dir)
    return render_table(report)

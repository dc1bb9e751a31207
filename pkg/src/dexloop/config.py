"""Run configuration.

One TOML document with a section per subsystem; every tunable default is
explicit here and in the shipped default_config.toml, so a config file is
the single audited record of an experiment's hyperparameters. User files
override defaults key by key; unknown sections or keys are schema errors.
"""

from __future__ import annotations

import sys
from importlib import resources
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .experiment import ExperimentConfig
from .loop import LoopConfig
from .retarget import RetargetConfig


class ConfigError(ValueError):
    """Config file is malformed or contradicts the schema."""


DEFAULTS: dict = {
    "retarget": {
        "lambda_anchor": 1.0,
        "lambda_joint": 0.01,
        "lambda_pose": 0.01,
        "twist_scale_translation": 1.0,
        "twist_scale_rotation": 0.3,
        "max_iterations": 10,
        "damping": 1e-3,
        "alignment_threshold_tau": 0.15,
        "resume_fraction": 0.8,
    },
    "policy": {
        "backend": "bc",
        "hidden": [256, 256],
        "dropout_rate": 0.1,
        "epochs": 300,
        "batch_size": 64,
        "learning_rate": 1e-3,
        "horizon": 16,
        "n_obs_steps": 2,
        "diffusion_steps": 50,
        "time_embed_dim": 16,
        "execute_steps": 8,
    },
    "uncertainty": {
        "passes": 10,
        "shared_noise": True,
        "segment_count": 3,
        "window_seconds": 2.0,
    },
    "simenv": {
        "dt": 0.05,
        "max_duration": 8.0,
        "demo_noise": 0.15,
    },
    "loop": {
        "initial_demos": 50,
        "corrective_per_round": 50,
        "rounds": 2,
        "retrain_trigger": 50,
        "eval_envs": 256,
        "hil_deviation_threshold": 0.3,
        "hil_dwell": 5,
        "review_source": "oracle",
        "fine_tune": False,
    },
    "experiment": {
        "tasks": ["pan", "drawer", "valve"],
        "seeds": [0, 1, 2],
        "bc_budgets": [50, 150],
    },
    "net": {
        "host": "127.0.0.1",
        "http_port": 8741,
        "udp_port": 8742,
        "client_rate_hz": 60,
        "server_rate_hz": 60,
    },
}


def _merge(defaults: dict, overrides: dict, path: str = "") -> dict:
    out = dict(defaults)
    for key, value in overrides.items():
        here = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key: {here}")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{here} must be a table")
            out[key] = _merge(defaults[key], value, here)
        else:
            out[key] = value
    return out


def load_config(path=None) -> dict:
    """Defaults merged with an optional user TOML file."""
    if path is None:
        return _merge(DEFAULTS, {})
    raw = Path(path).read_bytes()
    try:
        user = tomllib.loads(raw.decode("utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return _merge(DEFAULTS, user)


def default_config_text() -> str:
    return resources.files("dexloop").joinpath("data/default_config.toml").read_text()


# ---------------------------------------------------------------------------
# typed views
# ---------------------------------------------------------------------------

def retarget_config(cfg: dict) -> RetargetConfig:
    r = cfg["retarget"]
    return RetargetConfig(
        lambda_anchor=r["lambda_anchor"],
        lambda_joint=r["lambda_joint"],
        lambda_pose=r["lambda_pose"],
        twist_scale_translation=r["twist_scale_translation"],
        twist_scale_rotation=r["twist_scale_rotation"],
        max_iterations=int(r["max_iterations"]),
        damping=r["damping"],
        alignment_threshold_tau=r["alignment_threshold_tau"],
        resume_fraction=r["resume_fraction"],
    )


def loop_config(cfg: dict) -> LoopConfig:
    p, u, s, l = cfg["policy"], cfg["uncertainty"], cfg["simenv"], cfg["loop"]
    return LoopConfig(
        initial_demos=int(l["initial_demos"]),
        corrective_per_round=int(l["corrective_per_round"]),
        rounds=int(l["rounds"]),
        retrain_trigger=int(l["retrain_trigger"]),
        eval_envs=int(l["eval_envs"]),
        demo_noise=s["demo_noise"],
        execute_steps=int(p["execute_steps"]),
        mc_passes=int(u["passes"]),
        shared_noise=bool(u["shared_noise"]),
        hil_deviation_threshold=l["hil_deviation_threshold"],
        hil_dwell=int(l["hil_dwell"]),
        review_window_seconds=u["window_seconds"],
        segment_count=int(u["segment_count"]),
        backend=p["backend"],
        epochs=int(p["epochs"]),
        hidden=tuple(int(h) for h in p["hidden"]),
        dropout_rate=p["dropout_rate"],
        learning_rate=p["learning_rate"],
        batch_size=int(p["batch_size"]),
        fine_tune=bool(l["fine_tune"]),
    )


def experiment_config(cfg: dict) -> ExperimentConfig:
    e = cfg["experiment"]
    return ExperimentConfig(
        tasks=tuple(e["tasks"]),
        seeds=tuple(int(s) for s in e["seeds"]),
        bc_budgets=tuple(int(b) for b in e["bc_budgets"]),
        loop=loop_config(cfg),
        review_source=cfg["loop"]["review_source"],
    )

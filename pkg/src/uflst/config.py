"""Config file handling: defaults, YAML loading, dotted-path overrides.

The resolved config (defaults + file + overrides) is what a run snapshots
into its run directory, so experiment records stay diffable.
"""

from __future__ import annotations

import copy

import yaml

from .cluster import DbscanConfig
from .data import SyntheticSpec
from .episodes import EpisodeConfig
from .errors import ConfigError
from .losses import LossConfig
from .network import OptimizerConfig
from .pipeline import TrainConfig


def default_config():
    return {
        "rounds": 20,
        "epochs_per_round": 50,
        "episodes_per_round": 0,
        "seed": 0,
        "hidden_dims": [64, 64],
        "embedding_dim": 16,
        "knn_k": 20,
        "reset_adam_each_round": False,
        "eval_episodes": 100,
        "optimizer": {
            "learning_rate": 0.005,
            "decay_factor": 0.1,
            "decay_after_epoch": 25,
            "beta1": 0.9,
            "beta2": 0.999,
            "epsilon_adam": 1e-8,
        },
        "dbscan": {
            "ms": 4,
            "p_fraction": 0.02,
            "p_count": 0,
            "epsilon_override": 0.0,
            "per_point_minimum": False,
        },
        "episode": {
            "n_c_train": 32,
            "n_c_test": 5,
            "n_e": 4,
            "n_s": 1,
            "n_q": 3,
            "mode": "triplet",
        },
        "loss": {
            "kind": "hard_triplet",
            "margin": 0.5,
        },
        "synthetic": {
            "kind": "blobs",
            "num_classes": 20,
            "points_per_class": 50,
            "dim": 32,
            "heldout_classes": 5,
            "seed": 0,
            "separation": 6.0,
            "within_std": 1.0,
            "noise_dims": 0,
            "noise_std": 0.0,
            "cone": 0.1,
            "tight_classes": 5,
            "tight_cone": 0.025,
            "heldout_offset": 0.005,
            "radius_min": 5.0,
            "radius_ratio": 8.0,
            "radial_noise": 0.005,
            "heldout_radial_noise": 0.01,
            "direction_candidates": 2000,
        },
    }


def _merge(base, incoming, prefix=""):
    for key, value in incoming.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{path!r} must be a section")
            _merge(base[key], value, prefix=path + ".")
        else:
            base[key] = value


def load_config(path=None, overrides=()):
    """Defaults, optionally updated from a YAML file and key=value pairs.

    Override values are parsed as YAML scalars so `dbscan.ms=4` yields an
    int and `loss.kind=prototype` a string.  Unknown keys are errors.
    """
    cfg = default_config()
    if path is not None:
        with open(path, "r", encoding="utf-8") as f:
            loaded = yaml.safe_load(f) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        _merge(cfg, loaded)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        dotted, _, raw = item.partition("=")
        node = cfg
        parts = dotted.split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigError(f"unknown config section {part!r} in {dotted!r}")
            node = node[part]
        leaf = parts[-1]
        if leaf not in node:
            raise ConfigError(f"unknown config key {dotted!r}")
        if isinstance(node[leaf], dict):
            raise ConfigError(f"{dotted!r} names a section, not a value")
        node[leaf] = yaml.safe_load(raw)
    return cfg


def dump_config(cfg, path):
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(cfg, f, sort_keys=True, default_flow_style=None)


def build_train_config(cfg):
    cfg = copy.deepcopy(cfg)
    tc = TrainConfig(
        rounds=cfg["rounds"],
        epochs_per_round=cfg["epochs_per_round"],
        episodes_per_round=cfg["episodes_per_round"],
        seed=cfg["seed"],
        hidden_dims=tuple(cfg["hidden_dims"]),
        embedding_dim=cfg["embedding_dim"],
        knn_k=cfg["knn_k"],
        reset_adam_each_round=cfg["reset_adam_each_round"],
        eval_episodes=cfg["eval_episodes"],
        optimizer=OptimizerConfig(**cfg["optimizer"]),
        dbscan=DbscanConfig(**cfg["dbscan"]),
        episode=EpisodeConfig(**cfg["episode"]),
        loss=LossConfig(**cfg["loss"]),
    )
    tc.validate()
    return tc


def build_synthetic_spec(cfg):
    spec = SyntheticSpec(**cfg["synthetic"])
    spec.validate()
    return spec

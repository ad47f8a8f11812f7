"""Experiment configuration: YAML schema, defaults and validation.

A config is a nested mapping. Only ``scenario``, ``strategy.name`` and
``rounds`` are required; everything else has a default that may depend on
the scenario (domain runs use a different dataset and net). ``normalize``
returns the fully explicit form, which re-normalizes to itself.
"""

from __future__ import annotations

import copy
import math
from pathlib import Path

import yaml

from .engine import MATCHERS, STRATEGIES, StrategyConfig, TrainConfig
from .errors import ConfigError
from .factorized import NETS, V_INITS

SCENARIOS = ("standard_iid", "permuted_iid", "standard_noniid", "permuted_noniid", "domain_hetero")
PERMUTED = ("permuted_iid", "permuted_noniid", "domain_hetero")
PERMUTATION_RNG = "PCG64"

_LABEL_DEFAULTS = {
    "clients": 8,
    "local_epochs": 2,
    "net": {"name": "desk_shallow", "width": 8},
    "dataset": {"kind": "synthetic-blobs", "num_classes": 10, "num_examples": 2500, "height": 8,
                "width": 8, "depth": 1, "noise": 1.25, "domain_groups": 1},
    "strategy": {"tau": 0.5},
    "train": {"lr": 0.02},
    "v_init": "uniform_hidden",
}

_DOMAIN_DEFAULTS = {
    "clients": 12,
    "local_epochs": 2,
    "net": {"name": "desk_shallow", "width": 8},
    "dataset": {"kind": "synthetic-blobs", "num_classes": 40, "num_examples": 3750, "height": 8,
                "width": 8, "depth": 3, "noise": 1.5, "domain_groups": 4},
    "strategy": {"tau": 0.75},
    "train": {"lr": 0.05},
    "v_init": "ones",
}

_COMMON = {
    "global_seed": 0,
    "trials": 1,
    "output_dir": "runs/experiment",
    "save_models": False,
    "dirichlet_alpha": 0.5,
    "split": [0.8, 0.1, 0.1],
    "permutation_rng": PERMUTATION_RNG,
    "domains": {"count": 4, "clients_per_domain": 3},
    "train": {"momentum": 0.9, "weight_decay": 1e-6, "batch_size": 32},
    "strategy": {"epsilon": 10.0, "lambda_sparsity": 5e-4, "prox_mu": 0.01, "share_classifier": None,
                 "participation_fraction": 1.0, "matching": "similarity", "exclude_zero_sigma": False,
                 "match_count": 3},
}

_TOP_KEYS = {"scenario", "strategy", "rounds", "clients", "local_epochs", "net", "dataset", "train", "v_init",
             *_COMMON}
_DATASET_KEYS = {"kind", "num_classes", "num_examples", "height", "width", "depth", "noise",
                 "domain_groups", "prototype_seed", "path", "name"}


def default_share_classifier(scenario: str, strategy: str) -> bool:
    """Plain models keep classifiers local under permuted labels; factors always share."""
    if strategy.startswith("factorized"):
        return True
    return scenario not in PERMUTED


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def _is_num(x) -> bool:
    return (isinstance(x, (int, float)) and not isinstance(x, bool)) and math.isfinite(x)


def normalize(raw: dict) -> tuple[dict, list[str]]:
    """Fill defaults and check every invariant.

    Returns ``(config, errors)``; each error starts with its field path.
    """
    errors: list[str] = []
    if not isinstance(raw, dict):
        return {}, ["<root>: config must be a mapping"]
    raw = copy.deepcopy(raw)
    for key in sorted(set(raw) - _TOP_KEYS):
        errors.append(f"{key}: unknown field")

    scenario = raw.get("scenario")
    if scenario is None:
        errors.append("scenario: required")
    elif scenario not in SCENARIOS:
        errors.append(f"scenario: must be one of {', '.join(SCENARIOS)}")
    strategy = raw.get("strategy")
    if isinstance(strategy, str):
        raw["strategy"] = strategy = {"name": strategy}
    if not isinstance(strategy, dict) or "name" not in strategy:
        errors.append("strategy.name: required")
        strategy = {"name": None}
    elif strategy["name"] not in STRATEGIES:
        errors.append(f"strategy.name: must be one of {', '.join(STRATEGIES)}")
    if "rounds" not in raw:
        errors.append("rounds: required")

    defaults = _merge(_COMMON, _DOMAIN_DEFAULTS if scenario == "domain_hetero" else _LABEL_DEFAULTS)
    if isinstance(raw.get("dataset"), dict) and raw["dataset"].get("kind", "synthetic-blobs") != "synthetic-blobs":
        defaults["dataset"] = {"kind": raw["dataset"]["kind"]}
    if isinstance(raw.get("net"), dict) and raw["net"].get("name", defaults["net"]["name"]) != defaults["net"]["name"]:
        defaults["net"] = {"name": raw["net"]["name"]}
    cfg = _merge(defaults, {k: v for k, v in raw.items() if k in _TOP_KEYS})
    if "clients" not in raw and scenario == "domain_hetero":
        d = cfg["domains"]
        if _is_int(d.get("count")) and _is_int(d.get("clients_per_domain")):
            cfg["clients"] = d["count"] * d["clients_per_domain"]

    for key in ("rounds", "clients", "local_epochs", "trials"):
        if key in cfg and not (_is_int(cfg[key]) and cfg[key] >= 1):
            errors.append(f"{key}: must be an integer >= 1")
    if not _is_int(cfg["global_seed"]) or cfg["global_seed"] < 0:
        errors.append("global_seed: must be a non-negative integer")
    if not isinstance(cfg["save_models"], bool):
        errors.append("save_models: must be true or false")
    if cfg["v_init"] not in V_INITS:
        errors.append(f"v_init: must be one of {', '.join(V_INITS)}")
    if not isinstance(cfg["output_dir"], str) or not cfg["output_dir"]:
        errors.append("output_dir: must be a non-empty string")
    if cfg["permutation_rng"] != PERMUTATION_RNG:
        errors.append(f"permutation_rng: only {PERMUTATION_RNG} is supported")
    if not _is_num(cfg["dirichlet_alpha"]) or cfg["dirichlet_alpha"] <= 0:
        errors.append("dirichlet_alpha: must be positive")
    split = cfg["split"]
    if (not isinstance(split, list) or len(split) != 3 or not all(_is_num(f) and f >= 0 for f in split)
            or abs(sum(split) - 1) > 1e-9 or split[0] <= 0):
        errors.append("split: three non-negative fractions summing to 1 with a positive train share")

    st = cfg["strategy"]
    for key in sorted(set(st) - set(_COMMON["strategy"]) - {"name", "tau"}):
        errors.append(f"strategy.{key}: unknown field")
    if not _is_num(st["tau"]) or not 0 <= st["tau"] <= 1:
        errors.append("strategy.tau: must lie in [0, 1]")
    if not _is_num(st["epsilon"]) or st["epsilon"] <= 0:
        errors.append("strategy.epsilon: must be positive")
    if not _is_num(st["lambda_sparsity"]) or st["lambda_sparsity"] < 0:
        errors.append("strategy.lambda_sparsity: must be non-negative")
    if not _is_num(st["prox_mu"]) or st["prox_mu"] < 0:
        errors.append("strategy.prox_mu: must be non-negative")
    if not _is_num(st["participation_fraction"]) or not 0 < st["participation_fraction"] <= 1:
        errors.append("strategy.participation_fraction: must lie in (0, 1]")
    if st["matching"] not in MATCHERS:
        errors.append(f"strategy.matching: must be one of {', '.join(MATCHERS)}")
    if not isinstance(st["exclude_zero_sigma"], bool):
        errors.append("strategy.exclude_zero_sigma: must be true or false")
    if not _is_int(st["match_count"]) or st["match_count"] < 1:
        errors.append("strategy.match_count: must be an integer >= 1")
    if st["share_classifier"] is None and scenario in SCENARIOS and st.get("name") in STRATEGIES:
        st["share_classifier"] = default_share_classifier(scenario, st["name"])
    elif not isinstance(st["share_classifier"], bool):
        errors.append("strategy.share_classifier: must be true or false")

    tr = cfg["train"]
    for key in sorted(set(tr) - set(_COMMON["train"]) - {"lr"}):
        errors.append(f"train.{key}: unknown field")
    if not _is_num(tr["lr"]) or tr["lr"] <= 0:
        errors.append("train.lr: must be positive")
    if not _is_num(tr["momentum"]) or not 0 <= tr["momentum"] < 1:
        errors.append("train.momentum: must lie in [0, 1)")
    if not _is_num(tr["weight_decay"]) or tr["weight_decay"] < 0:
        errors.append("train.weight_decay: must be non-negative")
    if not _is_int(tr["batch_size"]) or tr["batch_size"] < 1:
        errors.append("train.batch_size: must be an integer >= 1")

    net = cfg["net"]
    if not isinstance(net, dict) or net.get("name") not in NETS:
        errors.append(f"net.name: must be one of {', '.join(sorted(NETS))}")

    ds = cfg["dataset"]
    for key in sorted(set(ds) - _DATASET_KEYS):
        errors.append(f"dataset.{key}: unknown field")
    if ds.get("kind") == "synthetic-blobs":
        for key in ("num_classes", "num_examples", "height", "width", "depth", "domain_groups"):
            if not (_is_int(ds.get(key)) and ds[key] >= 1):
                errors.append(f"dataset.{key}: must be an integer >= 1")
        if not _is_num(ds.get("noise")) or ds["noise"] < 0:
            errors.append("dataset.noise: must be non-negative")
    elif ds.get("kind") == "tiny-images":
        if not isinstance(ds.get("path"), str):
            errors.append("dataset.path: required for tiny-images")
    else:
        errors.append("dataset.kind: must be 'synthetic-blobs' or 'tiny-images'")

    dom = cfg["domains"]
    if scenario == "domain_hetero":
        if not (_is_int(dom.get("count")) and dom["count"] >= 1):
            errors.append("domains.count: must be an integer >= 1")
        elif not (_is_int(dom.get("clients_per_domain")) and dom["clients_per_domain"] >= 1):
            errors.append("domains.clients_per_domain: must be an integer >= 1")
        else:
            if _is_int(cfg.get("clients")) and cfg["clients"] != dom["count"] * dom["clients_per_domain"]:
                errors.append("clients: must equal domains.count * domains.clients_per_domain")
            n_cls = ds.get("num_classes")
            if _is_int(n_cls) and n_cls % dom["count"]:
                errors.append("dataset.num_classes: must be divisible by domains.count")

    if not errors:
        try:
            strategy_config(cfg)
            train_config(cfg)
        except ConfigError as exc:
            errors.append(f"strategy: {exc}")
    return cfg, errors


def strategy_config(cfg: dict) -> StrategyConfig:
    st = dict(cfg["strategy"])
    return StrategyConfig(strategy=st.pop("name"), **st)


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(local_epochs=cfg["local_epochs"], **cfg["train"])


def load_yaml(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"{path}: no such config file")
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from None
    return {} if data is None else data


def validate_config(path, overrides: dict | None = None) -> tuple[dict, list[str]]:
    """Load, apply ``overrides`` (top-level keys) and normalize."""
    raw = load_yaml(path)
    if overrides and isinstance(raw, dict):
        raw = {**raw, **overrides}
    return normalize(raw)


def load_config(path, overrides: dict | None = None) -> dict:
    cfg, errors = validate_config(path, overrides)
    if errors:
        raise ConfigError("invalid config:\n  " + "\n  ".join(errors))
    return cfg


def dump_config(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True, default_flow_style=False)

"""Strict JSON run configuration.

Unknown keys are rejected at every level so that a misspelt hyperparameter
fails loudly instead of silently falling back to its default.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Any, Dict, Mapping, Optional, Tuple

from groundfail_svi.errors import ConfigError, DomainError
from groundfail_svi.model_core import HyperParams, WeightSet

logger = logging.getLogger(__name__)

PATH_KEYS = ("dpm", "prior_ls", "prior_lf", "footprint", "truth_csv", "posterior_dir", "out_dir")
FLAG_KEYS = ("assume_normalized", "prune", "deterministic", "truncated_density", "plots")
# flags that live on HyperParams are set from the flags block
HYPER_KEYS = tuple(
    f.name for f in dataclasses.fields(HyperParams) if f.name not in ("prune", "deterministic")
)
TOP_LEVEL_KEYS = ("paths", "hyper", "init_weights", "true_weights", "flags", "evaluate", "output")


@dataclass(frozen=True)
class PathsConfig:
    dpm: Optional[str] = None
    prior_ls: Optional[str] = None
    prior_lf: Optional[str] = None
    footprint: Optional[str] = None
    truth_csv: Tuple[str, ...] = ()
    posterior_dir: Optional[str] = None
    out_dir: Optional[str] = None


@dataclass(frozen=True)
class Flags:
    assume_normalized: bool = False
    prune: bool = False
    deterministic: bool = True
    truncated_density: bool = True
    plots: bool = False


@dataclass(frozen=True)
class EvaluateConfig:
    threshold: float = 0.5
    n_thresholds: int = 100


@dataclass(frozen=True)
class RunConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    hyper: HyperParams = field(default_factory=HyperParams)
    init_weights: Optional[WeightSet] = None
    true_weights: Optional[WeightSet] = None
    flags: Flags = field(default_factory=Flags)
    evaluate: EvaluateConfig = field(default_factory=EvaluateConfig)
    decimals: int = 6

    def require(self, *keys: str) -> None:
        missing = [k for k in keys if not getattr(self.paths, k)]
        if missing:
            raise ConfigError(f"missing mandatory key(s): {', '.join('paths.' + k for k in missing)}")

    @property
    def out_dir(self) -> str:
        self.require("out_dir")
        return self.paths.out_dir

    @property
    def posterior_dir(self) -> str:
        return self.paths.posterior_dir or self.out_dir

    def with_overrides(self, out_dir: Optional[str] = None, seed: Optional[int] = None) -> "RunConfig":
        config = self
        if out_dir is not None:
            config = dataclasses.replace(config, paths=dataclasses.replace(config.paths, out_dir=os.path.abspath(out_dir)))
        if seed is not None:
            try:
                hyper = dataclasses.replace(config.hyper, seed=int(seed))
            except DomainError as exc:
                raise ConfigError(f"--seed: {exc}") from exc
            config = dataclasses.replace(config, hyper=hyper)
        return config


def _check_keys(block: Any, allowed, where: str) -> Mapping[str, Any]:
    if not isinstance(block, dict):
        raise ConfigError(f"{where} must be a JSON object")
    unknown = sorted(set(block) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    return block


def _bool(value: Any, where: str) -> bool:
    if not isinstance(value, bool):
        raise ConfigError(f"{where} must be true or false, got {value!r}")
    return value


def _number(value: Any, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{where} must be a number, got {value!r}")
    return float(value)


def _integer(value: Any, where: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{where} must be an integer, got {value!r}")
    return value


def _resolve(path: Any, base_dir: str, where: str) -> str:
    if not isinstance(path, str) or not path:
        raise ConfigError(f"{where} must be a non-empty path string")
    return os.path.normpath(path if os.path.isabs(path) else os.path.join(base_dir, path))


def _parse_paths(block: Mapping[str, Any], base_dir: str) -> PathsConfig:
    values: Dict[str, Any] = {}
    for key, raw in _check_keys(block, PATH_KEYS, "paths").items():
        if raw is None:
            continue
        if key == "truth_csv":
            items = raw if isinstance(raw, list) else [raw]
            values[key] = tuple(_resolve(p, base_dir, f"paths.truth_csv[{i}]") for i, p in enumerate(items))
        else:
            values[key] = _resolve(raw, base_dir, f"paths.{key}")
    return PathsConfig(**values)


def _parse_hyper(block: Mapping[str, Any], flags: Flags) -> HyperParams:
    values: Dict[str, Any] = {}
    for key, raw in _check_keys(block, HYPER_KEYS, "hyper").items():
        where = f"hyper.{key}"
        if key == "sigma_xor" and raw == "inf":
            values[key] = math.inf
        elif key in ("rho_decay",):
            values[key] = _bool(raw, where)
        elif key in ("batch_size", "e_sweeps_max", "max_epochs", "seed", "conv_window", "workers", "max_rho_halvings"):
            values[key] = None if raw is None and key == "workers" else _integer(raw, where)
        elif key == "y_floor" and raw is None:
            values[key] = None
        else:
            values[key] = _number(raw, where)
    try:
        return HyperParams(prune=flags.prune, deterministic=flags.deterministic, **values)
    except DomainError as exc:
        raise ConfigError(f"hyper: {exc}") from exc


def _parse_weights(block: Mapping[str, Any], where: str) -> WeightSet:
    _check_keys(block, WeightSet.field_names(), where)
    values = {k: _number(v, f"{where}.{k}") for k, v in block.items()}
    try:
        return WeightSet.from_mapping(values, base=WeightSet.initial())
    except DomainError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def parse_run_config(data: Any, base_dir: str) -> RunConfig:
    data = _check_keys(data, TOP_LEVEL_KEYS, "configuration")
    flags = Flags(**{k: _bool(v, f"flags.{k}") for k, v in _check_keys(data.get("flags", {}), FLAG_KEYS, "flags").items()})

    evaluate_block = _check_keys(data.get("evaluate", {}), ("threshold", "n_thresholds"), "evaluate")
    evaluate = EvaluateConfig(
        threshold=_number(evaluate_block.get("threshold", 0.5), "evaluate.threshold"),
        n_thresholds=_integer(evaluate_block.get("n_thresholds", 100), "evaluate.n_thresholds"),
    )
    if evaluate.n_thresholds < 1:
        raise ConfigError("evaluate.n_thresholds must be >= 1")

    output = _check_keys(data.get("output", {}), ("decimals",), "output")
    decimals = _integer(output.get("decimals", 6), "output.decimals")
    if not 0 <= decimals <= 17:
        raise ConfigError("output.decimals must lie in [0, 17]")

    init = data.get("init_weights")
    truth = data.get("true_weights")
    return RunConfig(
        paths=_parse_paths(data.get("paths", {}), base_dir),
        hyper=_parse_hyper(data.get("hyper", {}), flags),
        init_weights=None if init is None else _parse_weights(init, "init_weights"),
        true_weights=None if truth is None else _parse_weights(truth, "true_weights"),
        flags=flags,
        evaluate=evaluate,
        decimals=decimals,
    )


def load_run_config(path: str) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}") from exc
    except OSError as exc:
        raise ConfigError(f"cannot read configuration {path}: {exc}") from exc
    config = parse_run_config(data, os.path.dirname(os.path.abspath(path)))
    logger.debug("loaded configuration from %s", path)
    return config

"""Command-line entry points: simulate, infer, evaluate and export.

Usage::

    groundfail-svi <simulate|infer|evaluate|export> --config <path> [--out <dir>] [--seed <n>]
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from groundfail_svi.config import RunConfig, load_run_config
from groundfail_svi.errors import DomainError, GroundFailError, InputIOError
from groundfail_svi.inference import InferenceResult, run_inference
from groundfail_svi.metrics import RocCurve, compare_prior_posterior
from groundfail_svi.model_core import WeightSet
from groundfail_svi.oracle import sample_event
from groundfail_svi.raster_io import (
    HazardCategory,
    Raster,
    align_to_grid,
    build_dataset,
    ensure_dir,
    normalize_dpm,
    read_ascii_grid,
    read_inventory_csv,
    rasterize_points,
    write_ascii_grid,
)

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
HAZARDS = {
    "ls": HazardCategory.LANDSLIDE,
    "lf": HazardCategory.LIQUEFACTION,
    "bd": HazardCategory.BUILDING_DAMAGE,
}
QUANTILES = (5, 25, 50, 75, 95)


def _write_json(payload, path: str) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            json.dump(payload, f, indent=2)
            f.write("\n")
    except OSError as exc:
        raise InputIOError(f"cannot write {path}: {exc}") from exc


def _write_frame(frame: pd.DataFrame, path: str, decimals: Optional[int] = None) -> None:
    float_format = None if decimals is None else f"%.{decimals}f"
    try:
        frame.to_csv(path, index=False, lineterminator="\n", float_format=float_format)
    except OSError as exc:
        raise InputIOError(f"cannot write {path}: {exc}") from exc


def _read_optional(path: Optional[str]) -> Optional[Raster]:
    return read_ascii_grid(path) if path else None


def _posterior_path(config: RunConfig, tag: str) -> str:
    return os.path.join(config.posterior_dir, f"posterior_{tag}.asc")


def cmd_simulate(config: RunConfig) -> List[str]:
    config.require("prior_ls", "prior_lf", "out_dir")
    prior_ls = read_ascii_grid(config.paths.prior_ls)
    prior_lf = align_to_grid(read_ascii_grid(config.paths.prior_lf), prior_ls.spec)
    footprint = _read_optional(config.paths.footprint)
    if footprint is not None:
        footprint = align_to_grid(footprint, prior_ls.spec)

    weights = config.true_weights or WeightSet.initial()
    rng = np.random.default_rng(config.hyper.seed)
    event = sample_event(
        prior_ls,
        prior_lf,
        footprint,
        weights,
        config.hyper,
        rng,
        seed=config.hyper.seed,
        truncated=config.flags.truncated_density,
    )
    written = event.write(ensure_dir(config.out_dir), config.decimals)
    logger.info(
        "simulated %dx%d event: %d landslide, %d liquefaction, %d damaged cells",
        event.grid.nrows,
        event.grid.ncols,
        int(event.x_ls.sum()),
        int(event.x_lf.sum()),
        int(event.x_bd.sum()),
    )
    return written


def _report(result: InferenceResult, config: RunConfig) -> Dict:
    return {
        "epochs": result.epochs,
        "converged": result.converged,
        "diverged": result.diverged,
        "valid_cells": result.valid_count,
        "pruned_cells": result.pruned_count,
        "initial_bound": result.bound_history[0],
        "final_bound": result.bound_history[-1],
        "rho_initial": config.hyper.rho,
        "rho_final": result.rho,
        "rho_halvings": result.rho_halvings,
        "seed": config.hyper.seed,
    }


def cmd_infer(config: RunConfig) -> List[str]:
    config.require("dpm", "prior_ls", "prior_lf", "out_dir")
    h = config.hyper
    dpm = normalize_dpm(read_ascii_grid(config.paths.dpm), h.delta, config.flags.assume_normalized)
    grid = dpm.spec
    prior_ls = align_to_grid(read_ascii_grid(config.paths.prior_ls), grid)
    prior_lf = align_to_grid(read_ascii_grid(config.paths.prior_lf), grid)
    footprint = _read_optional(config.paths.footprint)
    if footprint is not None:
        footprint = align_to_grid(footprint, grid)
    dataset = build_dataset(dpm, prior_ls, prior_lf, footprint, h.delta)

    start = time.perf_counter()
    result = run_inference(dataset, h, config.init_weights)
    wall_time = time.perf_counter() - start
    logger.info("inference took %.2fs", wall_time)

    out_dir = ensure_dir(config.out_dir)
    written = []
    for tag in HAZARDS:
        path = os.path.join(out_dir, f"posterior_{tag}.asc")
        write_ascii_grid(result.posteriors[tag], path, config.decimals)
        written.append(path)

    path = os.path.join(out_dir, "weights_fitted.json")
    _write_json(result.weights.as_dict(), path)
    written.append(path)

    path = os.path.join(out_dir, "bound_history.csv")
    history = pd.DataFrame({"epoch": np.arange(len(result.bound_history)), "bound": result.bound_history})
    _write_frame(history, path)
    written.append(path)

    path = os.path.join(out_dir, "run_report.json")
    _write_json(_report(result, config), path)
    written.append(path)

    # wall time lives outside run_report.json
    path = os.path.join(out_dir, "timing.json")
    _write_json({"command": "infer", "wall_time_s": round(wall_time, 3)}, path)
    written.append(path)
    return written


def _roc_frame(curves: Dict[str, RocCurve]) -> pd.DataFrame:
    frames = [curve.to_frame().assign(curve=label) for label, curve in curves.items()]
    return pd.concat(frames, ignore_index=True)[["curve", "threshold", "tpr", "fpr"]]


def _plot_roc(curves: Dict[str, RocCurve], hazard: str, path: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.figure(figsize=(6, 6))
    for label, curve in curves.items():
        frame = curve.to_frame()
        plt.plot(frame["fpr"], frame["tpr"], linewidth=2, label=label)
    plt.plot([0, 1], [0, 1], linestyle="--", color="grey", linewidth=1)
    plt.title(f"ROC: {HAZARDS[hazard].value}")
    plt.xlabel("False positive rate")
    plt.ylabel("True positive rate")
    plt.legend(loc="lower right")
    plt.grid(True, alpha=0.3)
    plt.tight_layout()
    plt.savefig(path, dpi=150)
    plt.close()


def cmd_evaluate(config: RunConfig) -> List[str]:
    config.require("prior_ls", "prior_lf", "truth_csv", "out_dir")
    points = []
    for path in config.paths.truth_csv:
        points.extend(read_inventory_csv(path))

    priors = {"ls": config.paths.prior_ls, "lf": config.paths.prior_lf, "bd": None}
    out_dir = ensure_dir(config.out_dir)
    metrics: Dict[str, Dict] = {}
    written = []
    for tag, category in HAZARDS.items():
        if not any(p.category is category for p in points):
            logger.warning("no ground truth for %s; skipping", category.value)
            continue
        posterior = read_ascii_grid(_posterior_path(config, tag))
        truth = rasterize_points(points, posterior.spec, category)
        prior = align_to_grid(read_ascii_grid(priors[tag]), posterior.spec) if priors[tag] else None
        try:
            report, curves = compare_prior_posterior(
                prior, posterior, truth, config.evaluate.threshold, config.evaluate.n_thresholds
            )
        except DomainError as exc:
            logger.warning("cannot evaluate %s: %s", category.value, exc)
            continue
        metrics[tag] = report
        path = os.path.join(out_dir, f"roc_{tag}.csv")
        _write_frame(_roc_frame(curves), path, config.decimals)
        written.append(path)
        if config.flags.plots:
            path = os.path.join(out_dir, f"roc_{tag}.png")
            _plot_roc(curves, tag, path)
            written.append(path)
        logger.info("%s: posterior AUC %.3f, CEL %.4f", category.value, report["auc_posterior"], report["cel_posterior"])

    path = os.path.join(out_dir, "metrics.json")
    _write_json(metrics, path)
    written.append(path)
    return written


def _summary_line(tag: str, values: np.ndarray, decimals: int) -> str:
    if values.size == 0:
        return f"{tag}: n=0"
    stats = [("min", values.min()), ("max", values.max()), ("mean", values.mean())]
    stats += [(f"q{q:02d}", v) for q, v in zip(QUANTILES, np.percentile(values, QUANTILES))]
    return f"{tag}: n={values.size} " + " ".join(f"{name}={value:.{decimals}f}" for name, value in stats)


def cmd_export(config: RunConfig) -> List[str]:
    out_dir = ensure_dir(config.out_dir)
    written = []
    lines = []
    for tag in HAZARDS:
        raster = read_ascii_grid(_posterior_path(config, tag))
        rows, cols = np.nonzero(~raster.nodata)
        values = raster.values[rows, cols]
        path = os.path.join(out_dir, f"heatmap_{tag}.csv")
        _write_frame(pd.DataFrame({"row": rows, "col": cols, "value": values}), path, config.decimals)
        written.append(path)
        lines.append(_summary_line(tag, values, config.decimals))

    path = os.path.join(out_dir, "summary.txt")
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise InputIOError(f"cannot write {path}: {exc}") from exc
    written.append(path)
    return written


COMMANDS: Dict[str, Callable[[RunConfig], List[str]]] = {
    "simulate": cmd_simulate,
    "infer": cmd_infer,
    "evaluate": cmd_evaluate,
    "export": cmd_export,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="groundfail-svi",
        description="Bayesian updating of ground-failure and building-damage maps from damage proxy maps.",
    )
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="path to the JSON run configuration")
    parser.add_argument("--out", help="output directory (overrides paths.out_dir)")
    parser.add_argument("--seed", type=int, help="random seed (overrides hyper.seed)")
    parser.add_argument("-v", "--verbose", action="store_true", help="log at DEBUG level")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format=LOG_FORMAT,
        stream=sys.stderr,
    )
    try:
        config = load_run_config(args.config).with_overrides(out_dir=args.out, seed=args.seed)
        logger.info("%s started", args.command)
        written = COMMANDS[args.command](config)
    except GroundFailError as exc:
        logger.error("%s", exc)
        return exc.exit_code
    except DomainError as exc:
        logger.error("%s", exc)
        return DomainError.exit_code
    except OSError as exc:
        logger.error("%s", exc)
        return InputIOError.exit_code
    for path in written:
        logger.info("wrote %s", path)
    logger.info("%s finished", args.command)
    return 0


if __name__ == "__main__":
    sys.exit(main())

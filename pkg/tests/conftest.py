import json
import os

import numpy as np
import pytest

from groundfail_svi.bound import PosteriorState
from groundfail_svi.model_core import HyperParams, LocationRecord, WeightSet
from groundfail_svi.raster_io import GridSpec, Raster, write_ascii_grid


def draw_weights(rng, scale=2.0, noise_max=0.5, we_y_range=(0.5, 1.5)):
    """Admissible weights with every coordinate away from its bound."""
    values = {name: rng.uniform(-scale, scale) for name in WeightSet.field_names()}
    for name in ("we_ls", "we_lf", "we_bd"):
        values[name] = rng.uniform(0.05, noise_max)
    values["w0_y"] = -rng.uniform(0.05, scale)
    values["we_y"] = rng.uniform(*we_y_range)
    return WeightSet(**values)


def draw_record(rng, index=(0, 0), has_building=None):
    if has_building is None:
        has_building = bool(rng.random() < 0.5)
    return LocationRecord(
        cell_index=index,
        y=float(rng.uniform(0.01, 1.0)),
        alpha_ls=float(rng.uniform(0.0, 1.0)),
        alpha_lf=float(rng.uniform(0.0, 1.0)),
        has_building=has_building,
    )


def draw_state(rng, has_building, low=0.01, high=0.99):
    q = rng.uniform(low, high, size=3)
    return PosteriorState(float(q[0]), float(q[1]), float(q[2]) if has_building else None)


def synthetic_priors(rng, nrows, ncols, cellsize=0.01):
    grid = GridSpec(ncols, nrows, 140.0, 42.0, cellsize)
    prior_ls = Raster(grid, rng.beta(1.0, 4.0, size=grid.shape))
    prior_lf = Raster(grid, rng.beta(1.0, 4.0, size=grid.shape))
    footprint = Raster(grid, (rng.random(grid.shape) < 0.3).astype(float))
    return prior_ls, prior_lf, footprint


RECOVERY_WEIGHTS = {
    "w0_ls": -2.0, "wa_ls": 4.0, "we_ls": 0.1,
    "w0_lf": -2.0, "wa_lf": 4.0, "we_lf": 0.1,
    "w0_bd": -2.0, "w_ls_bd": 2.0, "w_lf_bd": 2.0, "we_bd": 0.1,
    "w0_y": -3.0, "w_ls_y": 1.5, "w_lf_y": 1.5, "w_bd_y": 1.5, "we_y": 0.5,
}


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def hyper():
    return HyperParams(workers=1)


@pytest.fixture
def make_run_dir(tmp_path):
    """Write priors, a footprint and a config; returns (config path, directory)."""

    def make(nrows=8, ncols=8, seed=3, hyper=None, flags=None, true_weights=None, extra_paths=None):
        rng = np.random.default_rng(seed)
        prior_ls, prior_lf, footprint = synthetic_priors(rng, nrows, ncols)
        inputs = tmp_path / "inputs"
        inputs.mkdir(exist_ok=True)
        for name, raster in (("prior_ls", prior_ls), ("prior_lf", prior_lf), ("footprint", footprint)):
            write_ascii_grid(raster, str(inputs / f"{name}.asc"), decimals=6)
        config = {
            "paths": {
                "dpm": "sim/dpm.asc",
                "prior_ls": "inputs/prior_ls.asc",
                "prior_lf": "inputs/prior_lf.asc",
                "footprint": "inputs/footprint.asc",
                "truth_csv": ["sim/truth_ls.csv", "sim/truth_lf.csv", "sim/truth_bd.csv"],
                "out_dir": "sim",
            },
            "hyper": {"max_epochs": 3, "seed": seed, **(hyper or {})},
            "flags": {"assume_normalized": True, **(flags or {})},
        }
        if true_weights is not None:
            config["true_weights"] = true_weights
        if extra_paths:
            config["paths"].update(extra_paths)
        path = tmp_path / "run.json"
        path.write_text(json.dumps(config, indent=2), encoding="utf-8")
        return str(path), str(tmp_path)

    return make


@pytest.fixture(autouse=True)
def thread_cap(monkeypatch):
    monkeypatch.setenv("GFSVI_THREADS", "2")
    yield


def read_bytes(directory):
    out = {}
    for name in sorted(os.listdir(directory)):
        full = os.path.join(directory, name)
        if os.path.isfile(full):
            with open(full, "rb") as f:
                out[name] = f.read()
    return out

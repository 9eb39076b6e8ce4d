"""Forward simulation of synthetic events and exact enumeration references.

The simulator draws events from the generative model with exclusivity of
landslide and liquefaction enforced by rejection. The exact routines enumerate
the (at most eight) latent configurations of one location and integrate the
latent noise terms with Gauss-Hermite quadrature.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
import os
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, List, Optional, Tuple

import numpy as np
from scipy.special import log_ndtr, logsumexp, ndtri

from groundfail_svi.bound import BoundGradient
from groundfail_svi.errors import DomainError, GridMismatchError, InputIOError
from groundfail_svi.model_core import (
    HyperParams,
    LocationRecord,
    WeightSet,
    dpm_log_density,
    dpm_mean,
    sigmoid,
    weight_lower_bounds,
    weight_upper_bounds,
    xor_log_potential,
)
from groundfail_svi.raster_io import (
    GridSpec,
    HazardCategory,
    InventoryPoint,
    Raster,
    write_ascii_grid,
    write_inventory_csv,
)

logger = logging.getLogger(__name__)

MAX_REJECTIONS = 100
DEFAULT_QUAD_ORDER = 20


@dataclass
class SyntheticEvent:
    grid: GridSpec
    x_ls: np.ndarray
    x_lf: np.ndarray
    x_bd: np.ndarray
    y: Raster
    true_weights: WeightSet
    seed: Optional[int] = None
    capped_cells: List[Tuple[int, int]] = field(default_factory=list)

    def truth_points(self, category: HazardCategory) -> List[InventoryPoint]:
        states = {
            HazardCategory.LANDSLIDE: self.x_ls,
            HazardCategory.LIQUEFACTION: self.x_lf,
            HazardCategory.BUILDING_DAMAGE: self.x_bd,
        }[HazardCategory(category)]
        x, y = self.grid.cell_centers()
        rows, cols = np.nonzero(states == 1)
        return [InventoryPoint(float(x[r, c]), float(y[r, c]), category) for r, c in zip(rows, cols)]

    def write(self, out_dir: str, decimals: int = 6) -> List[str]:
        """Serialise in the raster and inventory formats used for real inputs."""
        paths = []
        dpm_path = os.path.join(out_dir, "dpm.asc")
        write_ascii_grid(self.y, dpm_path, decimals)
        paths.append(dpm_path)
        for tag, category in (
            ("ls", HazardCategory.LANDSLIDE),
            ("lf", HazardCategory.LIQUEFACTION),
            ("bd", HazardCategory.BUILDING_DAMAGE),
        ):
            path = os.path.join(out_dir, f"truth_{tag}.csv")
            write_inventory_csv(self.truth_points(category), path)
            paths.append(path)
        meta = {
            "seed": self.seed,
            "grid": {
                "ncols": self.grid.ncols,
                "nrows": self.grid.nrows,
                "xllcorner": self.grid.xllcorner,
                "yllcorner": self.grid.yllcorner,
                "cellsize": self.grid.cellsize,
                "nodata_value": self.grid.nodata_value,
            },
            "capped_cells": [list(c) for c in self.capped_cells],
        }
        for name, payload in (("true_weights.json", self.true_weights.as_dict()), ("event_meta.json", meta)):
            path = os.path.join(out_dir, name)
            try:
                with open(path, "w", encoding="utf-8") as f:
                    json.dump(payload, f, indent=2, sort_keys=True)
                    f.write("\n")
            except OSError as exc:
                raise InputIOError(f"cannot write {path}: {exc}") from exc
            paths.append(path)
        return paths


def _draw_ground_failures(alpha_ls, alpha_lf, w: WeightSet, rng: np.random.Generator):
    n = alpha_ls.size
    eps = rng.standard_normal((2, n))
    p_ls = sigmoid(w.w0_ls + w.wa_ls * alpha_ls + w.we_ls * eps[0])
    p_lf = sigmoid(w.w0_lf + w.wa_lf * alpha_lf + w.we_lf * eps[1])
    u = rng.random((2, n))
    return (u[0] < p_ls).astype(np.int8), (u[1] < p_lf).astype(np.int8)


def sample_truncated_log_dpm(mean, scale: float, delta: float, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF draw of log(y + delta) ~ N(mean, scale) truncated above at log(1 + delta)."""
    mean = np.asarray(mean, dtype=float)
    upper = (math.log(1.0 + delta) - mean) / scale
    log_u = np.log(rng.random(mean.shape))
    p = np.exp(log_u + log_ndtr(upper))
    return mean + scale * ndtri(p)


def sample_event(
    prior_ls: Raster,
    prior_lf: Raster,
    footprint: Optional[Raster],
    w: WeightSet,
    h: HyperParams,
    rng: np.random.Generator,
    seed: Optional[int] = None,
    truncated: bool = True,
) -> SyntheticEvent:
    grid = prior_ls.spec
    for name, raster in (("prior_lf", prior_lf), ("footprint", footprint)):
        if raster is not None and not raster.spec.same_grid(grid):
            raise GridMismatchError(f"{name} is not aligned to prior_ls")

    a_ls = prior_ls.values.ravel()
    a_lf = prior_lf.values.ravel()
    valid = ~(np.isnan(a_ls) | np.isnan(a_lf))
    idx = np.flatnonzero(valid)
    a_ls, a_lf = np.clip(a_ls[idx], 0.0, 1.0), np.clip(a_lf[idx], 0.0, 1.0)

    x_ls, x_lf = _draw_ground_failures(a_ls, a_lf, w, rng)
    pending = np.flatnonzero((x_ls == 1) & (x_lf == 1))
    retries = 0
    while pending.size and retries < MAX_REJECTIONS:
        x_ls[pending], x_lf[pending] = _draw_ground_failures(a_ls[pending], a_lf[pending], w, rng)
        pending = pending[(x_ls[pending] == 1) & (x_lf[pending] == 1)]
        retries += 1
    capped = []
    if pending.size:
        ls_wins = a_ls[pending] >= a_lf[pending]
        x_ls[pending] = ls_wins.astype(np.int8)
        x_lf[pending] = (~ls_wins).astype(np.int8)
        capped = [divmod(int(i), grid.ncols) for i in idx[pending]]
        logger.warning("%d cells hit the rejection cap and were forced exclusive", len(capped))

    if footprint is None:
        has_bd = np.zeros(idx.size, dtype=bool)
    else:
        fp = footprint.values.ravel()[idx]
        has_bd = np.where(np.isnan(fp), False, fp > 0)
    eps_bd = rng.standard_normal(idx.size)
    p_bd = sigmoid(w.w0_bd + w.w_ls_bd * x_ls + w.w_lf_bd * x_lf + w.we_bd * eps_bd)
    x_bd = ((rng.random(idx.size) < p_bd) & has_bd).astype(np.int8)

    mean = dpm_mean(w, x_ls, x_lf, x_bd)
    if truncated:
        z = sample_truncated_log_dpm(mean, w.we_y, h.delta, rng)
    else:
        z = mean + w.we_y * rng.standard_normal(idx.size)
    y_valid = np.clip(np.exp(z) - h.delta, h.delta, 1.0)

    n = grid.ncols * grid.nrows
    states = {}
    for name, values in (("ls", x_ls), ("lf", x_lf), ("bd", x_bd)):
        full = np.zeros(n, dtype=np.int8)
        full[idx] = values
        states[name] = full.reshape(grid.shape)
    y = np.full(n, np.nan)
    y[idx] = y_valid
    return SyntheticEvent(
        grid=grid,
        x_ls=states["ls"],
        x_lf=states["lf"],
        x_bd=states["bd"],
        y=Raster(grid, y.reshape(grid.shape)),
        true_weights=w,
        seed=seed,
        capped_cells=capped,
    )


@lru_cache(maxsize=None)
def _gauss_hermite(order: int):
    return np.polynomial.hermite.hermgauss(order)


def _log_expected_activation(mean: float, noise_w: float, state: int, order: int) -> float:
    """log E_eps[p(x = state)] for a logistic node with N(0, 1) noise scaled by noise_w."""
    nodes, weights = _gauss_hermite(order)
    logits = mean + noise_w * math.sqrt(2.0) * nodes
    signed = logits if state == 1 else -logits
    # log sigma(t) = -softplus(-t)
    log_p = -np.logaddexp(0.0, -signed)
    return float(logsumexp(log_p, b=weights / math.sqrt(math.pi)))


def _configuration_log_terms(
    rec: LocationRecord, w: WeightSet, h: HyperParams, quad_order: int, truncated: bool
):
    if not rec.valid:
        raise DomainError(f"cell {rec.cell_index} is invalid")
    if quad_order < 5:
        raise DomainError("quad_order must be >= 5")
    m_ls = w.w0_ls + w.wa_ls * rec.alpha_ls
    m_lf = w.w0_lf + w.wa_lf * rec.alpha_lf
    bd_states = (0, 1) if rec.has_building else (None,)
    terms = []
    for x_ls, x_lf, x_bd in itertools.product((0, 1), (0, 1), bd_states):
        log_term = _log_expected_activation(m_ls, w.we_ls, x_ls, quad_order)
        log_term += _log_expected_activation(m_lf, w.we_lf, x_lf, quad_order)
        if x_bd is not None:
            m_bd = w.w0_bd + w.w_ls_bd * x_ls + w.w_lf_bd * x_lf
            log_term += _log_expected_activation(m_bd, w.we_bd, x_bd, quad_order)
        log_term += dpm_log_density(rec.y, (x_ls, x_lf, x_bd), w, h.delta, truncated)
        if not math.isinf(h.sigma_xor):
            log_term += xor_log_potential(0.0, x_ls, x_lf, h.sigma_xor)
        terms.append(((x_ls, x_lf, x_bd), log_term))
    return terms


def exact_log_evidence(
    rec: LocationRecord,
    w: WeightSet,
    h: HyperParams,
    quad_order: int = DEFAULT_QUAD_ORDER,
    truncated: bool = True,
) -> float:
    """log p(y, u = 0) of one location by enumeration of its latent states."""
    terms = _configuration_log_terms(rec, w, h, quad_order, truncated)
    return float(logsumexp([t for _, t in terms]))


@dataclass(frozen=True)
class ExactMarginals:
    p_ls: float
    p_lf: float
    p_bd: Optional[float] = None


def exact_posterior(
    rec: LocationRecord,
    w: WeightSet,
    h: HyperParams,
    quad_order: int = DEFAULT_QUAD_ORDER,
    truncated: bool = True,
) -> ExactMarginals:
    terms = _configuration_log_terms(rec, w, h, quad_order, truncated)
    configs = [c for c, _ in terms]
    log_joint = np.array([t for _, t in terms])
    joint = np.exp(log_joint - logsumexp(log_joint))
    p_ls = float(sum(p for (x_ls, _, _), p in zip(configs, joint) if x_ls == 1))
    p_lf = float(sum(p for (_, x_lf, _), p in zip(configs, joint) if x_lf == 1))
    p_bd = None
    if rec.has_building:
        p_bd = float(sum(p for (_, _, x_bd), p in zip(configs, joint) if x_bd == 1))
    return ExactMarginals(p_ls, p_lf, p_bd)


def finite_diff_gradient(fn: Callable[[WeightSet], float], w: WeightSet, step: float = 1e-5) -> BoundGradient:
    """Central differences, one-sided where a step would leave the admissible set."""
    if not step > 0:
        raise DomainError("step must be > 0")
    base = w.as_array()
    lower, upper = weight_lower_bounds(), weight_upper_bounds()
    grad = np.zeros_like(base)

    def at(values: np.ndarray) -> float:
        return fn(WeightSet.from_array(values))

    for i in range(base.size):
        plus, minus = base.copy(), base.copy()
        plus[i] += step
        minus[i] -= step
        if minus[i] < lower[i]:
            grad[i] = (at(plus) - at(base)) / step
        elif plus[i] > upper[i]:
            grad[i] = (at(base) - at(minus)) / step
        else:
            grad[i] = (at(plus) - at(minus)) / (2.0 * step)
    return BoundGradient(grad)

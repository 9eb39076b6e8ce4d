"""Expectation-maximisation over mini-batches of locations.

Each iteration samples a mini-batch of valid cells, runs closed-form
coordinate updates of their marginals under the current weights, then takes a
projected gradient-ascent step on the weights using the batch gradient
rescaled to the full population.

An epoch that lowers the full-population bound by more than
``divergence_tol`` of its magnitude is rolled back and retried with half the
step size, at most ``max_rho_halvings`` times.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from groundfail_svi.bound import (
    CellBatch,
    PosteriorState,
    PosteriorTable,
    clamp_q,
    gradient_sum,
    location_bounds,
    node_logits,
    total_bound,
    weight_gradient,
)
from groundfail_svi.errors import DomainError, EmptyDatasetError, NonFiniteBoundError
from groundfail_svi.model_core import HyperParams, LocationRecord, NodeKind, WeightSet, project_weights, sigmoid
from groundfail_svi.parallel import map_chunks, worker_count
from groundfail_svi.raster_io import LocationTable, Raster

logger = logging.getLogger(__name__)

UPDATE_ORDER = (NodeKind.LS, NodeKind.LF, NodeKind.BD)


@dataclass
class InferenceRunState:
    epoch: int
    q_table: PosteriorTable
    weights: WeightSet
    bound_history: List[float]
    rng: np.random.Generator
    iteration: int = 0
    rho: float = 0.0

    def snapshot(self) -> "InferenceRunState":
        return dataclasses.replace(self, q_table=self.q_table.copy(), bound_history=list(self.bound_history))


class MaskResult(NamedTuple):
    indices: np.ndarray
    pruned: int


@dataclass
class InferenceResult:
    posteriors: Dict[str, Raster]
    weights: WeightSet
    bound_history: List[float]
    epochs: int
    converged: bool
    valid_count: int
    pruned_count: int
    rho: float = 0.0
    rho_halvings: int = 0
    diverged: bool = False


def _coordinate_sweeps(cells: CellBatch, q: PosteriorTable, w: WeightSet, h: HyperParams) -> PosteriorTable:
    q = q.copy()
    active = np.ones(len(cells), dtype=bool)
    for _ in range(h.e_sweeps_max):
        change = np.zeros(len(cells))
        for node in UPDATE_ORDER:
            updatable = active & cells.has_bd if node is NodeKind.BD else active
            new = clamp_q(sigmoid(node_logits(node, cells, q, w, h.sigma_xor)))
            attr = {NodeKind.LS: "q_ls", NodeKind.LF: "q_lf", NodeKind.BD: "q_bd"}[node]
            old = getattr(q, attr)
            change = np.maximum(change, np.where(updatable, np.abs(new - old), 0.0))
            setattr(q, attr, np.where(updatable, new, old))
        active &= change >= h.e_tol
        if not np.any(active):
            break
    return q


def e_step_cells(cells: CellBatch, q: PosteriorTable, w: WeightSet, h: HyperParams) -> PosteriorTable:
    """Coordinate ascent on every cell; cells stop once a sweep moves them less than e_tol."""
    if len(cells) == 0:
        return q.copy()

    def run(sl: slice) -> PosteriorTable:
        return _coordinate_sweeps(cells.take(sl), q.take(sl), w, h)

    parts = map_chunks(run, len(cells), worker_count(h.workers), ordered=True)
    return PosteriorTable(
        np.concatenate([p.q_ls for p in parts]),
        np.concatenate([p.q_lf for p in parts]),
        np.concatenate([p.q_bd for p in parts]),
    )


def e_step(rec: LocationRecord, q: PosteriorState, w: WeightSet, h: HyperParams) -> PosteriorState:
    if not rec.valid:
        raise DomainError(f"cell {rec.cell_index} is invalid")
    if rec.has_building and q.q_bd is None:
        raise DomainError(f"cell {rec.cell_index} has a building but no q_bd")
    cells = CellBatch.from_records([rec], h.delta)
    table = _coordinate_sweeps(cells, PosteriorTable.from_states([q]), w, h)
    return table.state(0, rec.has_building)


def sample_minibatch(valid_cells: Sequence[int], batch_size: int, rng: np.random.Generator) -> np.ndarray:
    population = np.asarray(valid_cells)
    if population.size == 0:
        raise DomainError("cannot sample from an empty set of cells")
    if batch_size < 1:
        raise DomainError("batch_size must be >= 1")
    return rng.choice(population, size=min(batch_size, population.size), replace=False)


def m_step(
    batch: CellBatch,
    q_table: PosteriorTable,
    w: WeightSet,
    h: HyperParams,
    population_size: int,
    rho: Optional[float] = None,
) -> WeightSet:
    if len(batch) == 0:
        raise DomainError("m_step needs a non-empty batch")
    rho = h.rho if rho is None else rho
    grad = weight_gradient(batch, q_table, w, h)
    scale = rho * population_size / len(batch)
    raw = w.as_array() + scale * grad.values
    if not np.all(np.isfinite(raw)):
        bad = _first_nonfinite_cell(batch, q_table, w)
        raise NonFiniteBoundError(int(batch.index[bad]), w.as_dict())
    return WeightSet.from_array(project_weights(raw))


def _first_nonfinite_cell(batch: CellBatch, q_table: PosteriorTable, w: WeightSet) -> int:
    """Position of the first cell whose own gradient is non-finite, else 0."""
    for i in range(len(batch)):
        if not np.all(np.isfinite(gradient_sum(batch.take([i]), q_table.take([i]), w))):
            return i
    return 0


def check_convergence(bound_history: Sequence[float], window: int, rel_tol: float) -> bool:
    """Relative change between the moving averages of the last two windows."""
    if window < 2:
        raise DomainError("window must be >= 2")
    if len(bound_history) < 2 * window:
        return False
    history = np.asarray(bound_history[-2 * window:], dtype=float)
    previous, latest = history[:window].mean(), history[window:].mean()
    return abs(latest - previous) / max(abs(previous), np.finfo(float).tiny) < rel_tol


def mask_locations(dataset: LocationTable, h: HyperParams) -> MaskResult:
    keep = dataset.valid.copy()
    pruned = 0
    if h.prune:
        # cells with no proxy signal and negligible priors carry no information
        quiet = (
            keep
            & (dataset.y < h.effective_y_floor)
            & (dataset.alpha_ls < h.alpha_floor)
            & (dataset.alpha_lf < h.alpha_floor)
        )
        pruned = int(quiet.sum())
        keep &= ~quiet
        logger.info("pruned %d quiet cells", pruned)
    return MaskResult(np.flatnonzero(keep), pruned)


def cells_from_table(dataset: LocationTable, indices: np.ndarray, delta: float) -> CellBatch:
    return CellBatch(
        z=np.log(dataset.y[indices] + delta),
        alpha_ls=dataset.alpha_ls[indices],
        alpha_lf=dataset.alpha_lf[indices],
        has_bd=dataset.has_building[indices],
        index=np.asarray(indices),
    )


def _checked_bound(state: InferenceRunState, cells: CellBatch, h: HyperParams, dataset: LocationTable) -> float:
    value = total_bound(cells, state.q_table, state.weights, h)
    if not math.isfinite(value):
        per_cell = location_bounds(cells, state.q_table, state.weights, h.sigma_xor)
        bad = int(np.flatnonzero(~np.isfinite(per_cell))[0]) if np.any(~np.isfinite(per_cell)) else 0
        raise NonFiniteBoundError(dataset.cell_index(cells.index[bad]), state.weights.as_dict())
    return value


def run_epoch(state: InferenceRunState, cells: CellBatch, h: HyperParams, dataset: LocationTable) -> None:
    population = len(cells)
    positions = np.arange(population)
    for _ in range(math.ceil(population / h.batch_size)):
        state.iteration += 1
        rho = state.rho / math.sqrt(state.iteration) if h.rho_decay else state.rho
        batch = sample_minibatch(positions, h.batch_size, state.rng)
        sub = cells.take(batch)
        updated = e_step_cells(sub, state.q_table.take(batch), state.weights, h)
        state.q_table.put(batch, updated)
        try:
            state.weights = m_step(sub, updated, state.weights, h, population, rho)
        except NonFiniteBoundError as exc:
            raise NonFiniteBoundError(dataset.cell_index(exc.cell_index), exc.weights) from exc
    state.epoch += 1


def _attempt_epoch(
    state: InferenceRunState, cells: CellBatch, h: HyperParams, dataset: LocationTable
) -> Tuple[float, Optional[NonFiniteBoundError]]:
    try:
        run_epoch(state, cells, h, dataset)
        return _checked_bound(state, cells, h, dataset), None
    except NonFiniteBoundError as exc:
        return -math.inf, exc


def is_divergent(previous: float, current: float, tol: float) -> bool:
    """True when the bound fell by more than tol of its magnitude."""
    return current < previous - tol * max(abs(previous), 1.0)


def run_inference(dataset: LocationTable, h: HyperParams, init: Optional[WeightSet] = None) -> InferenceResult:
    mask = mask_locations(dataset, h)
    if mask.indices.size == 0:
        raise EmptyDatasetError("no valid cells left to run inference on")
    cells = cells_from_table(dataset, mask.indices, h.delta)
    logger.info("inference on %d cells (%d pruned)", len(cells), mask.pruned)

    state = InferenceRunState(
        epoch=0,
        q_table=PosteriorTable.initial(cells),
        weights=init if init is not None else WeightSet.initial(),
        bound_history=[],
        rng=np.random.default_rng(h.seed),
        rho=h.rho,
    )
    state.bound_history.append(_checked_bound(state, cells, h, dataset))

    converged = diverged = False
    halvings = 0
    while state.epoch < h.max_epochs:
        saved = state.snapshot()
        bound, error = _attempt_epoch(state, cells, h, dataset)
        previous = saved.bound_history[-1]
        if is_divergent(previous, bound, h.divergence_tol):
            state = saved
            if halvings == h.max_rho_halvings:
                if error is not None:
                    raise error
                logger.warning(
                    "bound still falls after %d step-size halvings; stopping at epoch %d", halvings, state.epoch
                )
                diverged = True
                break
            halvings += 1
            state.rho *= 0.5
            logger.warning(
                "epoch %d moved the bound from %.6f to %.6f; retrying with rho=%.6g",
                state.epoch + 1,
                previous,
                bound,
                state.rho,
            )
            continue
        state.bound_history.append(bound)
        logger.debug("epoch %d bound %.6f", state.epoch, bound)
        if check_convergence(state.bound_history, h.conv_window, h.conv_rel_tol):
            converged = True
            break
    logger.info("stopped after %d epochs (converged=%s, rho=%.6g)", state.epoch, converged, state.rho)

    state.q_table = e_step_cells(cells, state.q_table, state.weights, h)

    n = len(dataset)
    flat = {name: np.full(n, np.nan) for name in ("ls", "lf", "bd")}
    flat["ls"][mask.indices] = state.q_table.q_ls
    flat["lf"][mask.indices] = state.q_table.q_lf
    flat["bd"][mask.indices] = np.where(cells.has_bd, state.q_table.q_bd, np.nan)

    return InferenceResult(
        posteriors={name: dataset.to_raster(values) for name, values in flat.items()},
        weights=state.weights,
        bound_history=state.bound_history,
        epochs=state.epoch,
        converged=converged,
        valid_count=int(mask.indices.size),
        pruned_count=mask.pruned,
        rho=state.rho,
        rho_halvings=halvings,
        diverged=diverged,
    )

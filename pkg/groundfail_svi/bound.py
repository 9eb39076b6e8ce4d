"""Mean-field variational lower bound, its coordinate logits and weight gradient.

All kernels operate on arrays of cells (`CellBatch`) and their marginals
(`PosteriorTable`); the per-location functions are thin wrappers over them.

Per cell the bound is the sum of

  * the DPM term  -z - log s - E_q[(z - mu(x))^2] / (2 s^2),  z = log(y + delta),
  * the LS/LF prior terms with the noise-inflated softplus bounds,
  * the BD term, an exact mean-field expectation over the four parent
    configurations of (LS, LF),
  * the exclusivity penalty -(u^2 + (1 - 2u) q_ls q_lf) / (2 sigma^2) with u = 0,
  * the entropy of q.

Every term is multilinear in (q_ls, q_lf, q_bd), so the coordinate logit T of
a node does not depend on that node's own marginal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import entr

from groundfail_svi.errors import DomainError
from groundfail_svi.model_core import (
    Q_MIN,
    HyperParams,
    LocationRecord,
    NodeKind,
    WeightSet,
    sigmoid,
    softplus,
)
from groundfail_svi.parallel import map_chunks, worker_count

Q_MAX = 1.0 - Q_MIN


def clamp_q(q):
    return np.clip(q, Q_MIN, Q_MAX)


@dataclass(frozen=True)
class PosteriorState:
    """Variational marginals of one location; q_bd is None without a footprint."""

    q_ls: float
    q_lf: float
    q_bd: Optional[float] = None

    def __post_init__(self):
        for name in ("q_ls", "q_lf", "q_bd"):
            value = getattr(self, name)
            if value is None:
                continue
            if not (Q_MIN <= value <= Q_MAX):
                raise DomainError(f"{name}={value} outside [{Q_MIN}, {Q_MAX}]")

    @classmethod
    def clamped(cls, q_ls: float, q_lf: float, q_bd: Optional[float] = None) -> "PosteriorState":
        return cls(
            float(clamp_q(q_ls)),
            float(clamp_q(q_lf)),
            None if q_bd is None else float(clamp_q(q_bd)),
        )


@dataclass(frozen=True)
class BoundGradient:
    """Gradient of the bound laid out like WeightSet.as_array()."""

    values: np.ndarray

    def __getitem__(self, name: str) -> float:
        return float(self.values[WeightSet.field_names().index(name)])


@dataclass
class CellBatch:
    """Observation arrays of a set of valid cells."""

    z: np.ndarray
    alpha_ls: np.ndarray
    alpha_lf: np.ndarray
    has_bd: np.ndarray
    index: np.ndarray

    def __len__(self) -> int:
        return len(self.z)

    @classmethod
    def from_records(cls, records: Sequence[LocationRecord], delta: float) -> "CellBatch":
        for rec in records:
            if not rec.valid:
                raise DomainError(f"cell {rec.cell_index} is invalid")
        return cls(
            z=np.log(np.array([r.y for r in records], dtype=float) + delta),
            alpha_ls=np.array([r.alpha_ls for r in records], dtype=float),
            alpha_lf=np.array([r.alpha_lf for r in records], dtype=float),
            has_bd=np.array([r.has_building for r in records], dtype=bool),
            index=np.arange(len(records)),
        )

    def take(self, idx) -> "CellBatch":
        return CellBatch(self.z[idx], self.alpha_ls[idx], self.alpha_lf[idx], self.has_bd[idx], self.index[idx])


@dataclass
class PosteriorTable:
    """Marginals aligned with a CellBatch. q_bd is ignored where has_bd is False."""

    q_ls: np.ndarray
    q_lf: np.ndarray
    q_bd: np.ndarray

    def __len__(self) -> int:
        return len(self.q_ls)

    @classmethod
    def from_states(cls, states: Sequence[PosteriorState]) -> "PosteriorTable":
        return cls(
            np.array([s.q_ls for s in states], dtype=float),
            np.array([s.q_lf for s in states], dtype=float),
            np.array([0.5 if s.q_bd is None else s.q_bd for s in states], dtype=float),
        )

    @classmethod
    def initial(cls, cells: CellBatch) -> "PosteriorTable":
        return cls(clamp_q(cells.alpha_ls.copy()), clamp_q(cells.alpha_lf.copy()), np.full(len(cells), 0.5))

    def copy(self) -> "PosteriorTable":
        return PosteriorTable(self.q_ls.copy(), self.q_lf.copy(), self.q_bd.copy())

    def take(self, idx) -> "PosteriorTable":
        return PosteriorTable(self.q_ls[idx], self.q_lf[idx], self.q_bd[idx])

    def put(self, idx, other: "PosteriorTable") -> None:
        self.q_ls[idx] = other.q_ls
        self.q_lf[idx] = other.q_lf
        self.q_bd[idx] = other.q_bd

    def state(self, i: int, has_bd: bool) -> PosteriorState:
        return PosteriorState(float(self.q_ls[i]), float(self.q_lf[i]), float(self.q_bd[i]) if has_bd else None)


def xor_coefficient(sigma: float) -> float:
    """1 / (2 sigma^2); zero when the coupling is switched off."""
    return 0.0 if math.isinf(sigma) else 1.0 / (2.0 * sigma * sigma)


def _effective_q_bd(cells: CellBatch, q: PosteriorTable) -> np.ndarray:
    return np.where(cells.has_bd, q.q_bd, 0.0)


def _dpm_residual(cells: CellBatch, q: PosteriorTable, w: WeightSet):
    qbd = _effective_q_bd(cells, q)
    r = cells.z - w.w0_y - (w.w_ls_y * q.q_ls + w.w_lf_y * q.q_lf + w.w_bd_y * qbd)
    var = (
        w.w_ls_y ** 2 * q.q_ls * (1.0 - q.q_ls)
        + w.w_lf_y ** 2 * q.q_lf * (1.0 - q.q_lf)
        + w.w_bd_y ** 2 * qbd * (1.0 - qbd)
    )
    return r, var, qbd


def _prior_terms(q_i, alpha, w0, wa, we):
    m = w0 + wa * alpha
    e = 0.5 * we * we
    return m, e, -q_i * softplus(-m + e) - (1.0 - q_i) * softplus(m + e)


def _bd_configurations(q: PosteriorTable, w: WeightSet):
    """Mean-field weights and logits of the (LS, LF) configurations 00, 10, 01, 11."""
    a, b = q.q_ls, q.q_lf
    pi = (
        (1.0 - a) * (1.0 - b),
        a * (1.0 - b),
        (1.0 - a) * b,
        a * b,
    )
    logits = (
        w.w0_bd,
        w.w0_bd + w.w_ls_bd,
        w.w0_bd + w.w_lf_bd,
        w.w0_bd + w.w_ls_bd + w.w_lf_bd,
    )
    return pi, logits


def _bd_log_terms(q_bd, logit, e):
    return -q_bd * softplus(-logit + e) - (1.0 - q_bd) * softplus(logit + e)


def location_bounds(cells: CellBatch, q: PosteriorTable, w: WeightSet, sigma: float) -> np.ndarray:
    """Per-cell bound contributions."""
    s = w.we_y
    r, var, _ = _dpm_residual(cells, q, w)
    total = -cells.z - math.log(s) - (r * r + var) / (2.0 * s * s)

    total = total + _prior_terms(q.q_ls, cells.alpha_ls, w.w0_ls, w.wa_ls, w.we_ls)[2]
    total = total + _prior_terms(q.q_lf, cells.alpha_lf, w.w0_lf, w.wa_lf, w.we_lf)[2]

    pi, logits = _bd_configurations(q, w)
    e_bd = 0.5 * w.we_bd ** 2
    bd = sum(p * _bd_log_terms(q.q_bd, logit, e_bd) for p, logit in zip(pi, logits))
    total = total + np.where(cells.has_bd, bd, 0.0)

    total = total - xor_coefficient(sigma) * q.q_ls * q.q_lf

    entropy = entr(q.q_ls) + entr(1.0 - q.q_ls) + entr(q.q_lf) + entr(1.0 - q.q_lf)
    entropy = entropy + np.where(cells.has_bd, entr(q.q_bd) + entr(1.0 - q.q_bd), 0.0)
    return total + entropy


def node_logits(node: NodeKind, cells: CellBatch, q: PosteriorTable, w: WeightSet, sigma: float) -> np.ndarray:
    """Derivative of the entropy-free bound with respect to q of one node."""
    s2 = w.we_y ** 2
    r, _, _ = _dpm_residual(cells, q, w)
    pi, logits = _bd_configurations(q, w)
    e_bd = 0.5 * w.we_bd ** 2
    a, b = q.q_ls, q.q_lf

    if node is NodeKind.BD:
        dpm = (2.0 * w.w_bd_y * r - w.w_bd_y ** 2 * (1.0 - 2.0 * q.q_bd)) / (2.0 * s2)
        bd = sum(p * (softplus(logit + e_bd) - softplus(-logit + e_bd)) for p, logit in zip(pi, logits))
        return np.where(cells.has_bd, dpm + bd, 0.0)

    g = [_bd_log_terms(q.q_bd, logit, e_bd) for logit in logits]
    if node is NodeKind.LS:
        weight, q_i, alpha = w.w_ls_y, a, cells.alpha_ls
        m, e, _ = _prior_terms(a, alpha, w.w0_ls, w.wa_ls, w.we_ls)
        bd = (1.0 - b) * (g[1] - g[0]) + b * (g[3] - g[2])
        spouse = b
    elif node is NodeKind.LF:
        weight, q_i, alpha = w.w_lf_y, b, cells.alpha_lf
        m, e, _ = _prior_terms(b, alpha, w.w0_lf, w.wa_lf, w.we_lf)
        bd = (1.0 - a) * (g[2] - g[0]) + a * (g[3] - g[1])
        spouse = a
    else:
        raise DomainError(f"{node} is not a latent node")

    dpm = (2.0 * weight * r - weight ** 2 * (1.0 - 2.0 * q_i)) / (2.0 * s2)
    prior = softplus(m + e) - softplus(-m + e)
    xor = -xor_coefficient(sigma) * spouse
    return dpm + prior + np.where(cells.has_bd, bd, 0.0) + xor


def gradient_sum(cells: CellBatch, q: PosteriorTable, w: WeightSet) -> np.ndarray:
    """Gradient of the summed bound over the given cells, WeightSet layout."""
    names = WeightSet.field_names()
    grad = dict.fromkeys(names, 0.0)
    s = w.we_y
    s2 = s * s
    r, var, qbd = _dpm_residual(cells, q, w)

    grad["w0_y"] = float(np.sum(r) / s2)
    grad["w_ls_y"] = float(np.sum(r * q.q_ls - w.w_ls_y * q.q_ls * (1.0 - q.q_ls)) / s2)
    grad["w_lf_y"] = float(np.sum(r * q.q_lf - w.w_lf_y * q.q_lf * (1.0 - q.q_lf)) / s2)
    grad["w_bd_y"] = float(np.sum(r * qbd - w.w_bd_y * qbd * (1.0 - qbd)) / s2)
    grad["we_y"] = float(np.sum(-1.0 / s + (r * r + var) / (s2 * s)))

    for tag, q_i, alpha in (("ls", q.q_ls, cells.alpha_ls), ("lf", q.q_lf, cells.alpha_lf)):
        w0, wa, we = getattr(w, f"w0_{tag}"), getattr(w, f"wa_{tag}"), getattr(w, f"we_{tag}")
        m, e, _ = _prior_terms(q_i, alpha, w0, wa, we)
        on, off = sigmoid(-m + e), sigmoid(m + e)
        d_m = q_i * on - (1.0 - q_i) * off
        d_e = -q_i * on - (1.0 - q_i) * off
        grad[f"w0_{tag}"] = float(np.sum(d_m))
        grad[f"wa_{tag}"] = float(np.sum(alpha * d_m))
        grad[f"we_{tag}"] = float(we * np.sum(d_e))

    bd_cells = cells.has_bd
    if np.any(bd_cells):
        sub = q.take(bd_cells)
        pi, logits = _bd_configurations(sub, w)
        e_bd = 0.5 * w.we_bd ** 2
        d_l, d_e = [], []
        for p, logit in zip(pi, logits):
            on, off = sigmoid(-logit + e_bd), sigmoid(logit + e_bd)
            d_l.append(p * (sub.q_bd * on - (1.0 - sub.q_bd) * off))
            d_e.append(p * (-sub.q_bd * on - (1.0 - sub.q_bd) * off))
        grad["w0_bd"] = float(np.sum(d_l[0] + d_l[1] + d_l[2] + d_l[3]))
        grad["w_ls_bd"] = float(np.sum(d_l[1] + d_l[3]))
        grad["w_lf_bd"] = float(np.sum(d_l[2] + d_l[3]))
        grad["we_bd"] = float(w.we_bd * np.sum(d_e[0] + d_e[1] + d_e[2] + d_e[3]))

    return np.array([grad[name] for name in names])


RecordsLike = Union[CellBatch, Sequence[LocationRecord]]
PosteriorsLike = Union[PosteriorTable, Sequence[PosteriorState]]


def _as_arrays(records: RecordsLike, q: PosteriorsLike, h: HyperParams) -> Tuple[CellBatch, PosteriorTable]:
    cells = records if isinstance(records, CellBatch) else CellBatch.from_records(list(records), h.delta)
    if isinstance(q, PosteriorTable):
        table = q
    else:
        states = list(q)
        for rec_has_bd, state in zip(cells.has_bd, states):
            if rec_has_bd and state.q_bd is None:
                raise DomainError("a footprint cell needs a q_bd marginal")
        table = PosteriorTable.from_states(states)
    if len(table) != len(cells):
        raise DomainError(f"{len(cells)} cells but {len(table)} posterior states")
    return cells, table


def _check_state(rec: LocationRecord, q: PosteriorState) -> None:
    if not rec.valid:
        raise DomainError(f"cell {rec.cell_index} is invalid")
    if rec.has_building and q.q_bd is None:
        raise DomainError(f"cell {rec.cell_index} has a building but no q_bd")


def location_bound(rec: LocationRecord, q: PosteriorState, w: WeightSet, h: HyperParams) -> float:
    _check_state(rec, q)
    cells, table = _as_arrays([rec], [q], h)
    return float(location_bounds(cells, table, w, h.sigma_xor)[0])


def total_bound(records: RecordsLike, q: PosteriorsLike, w: WeightSet, h: HyperParams) -> float:
    cells, table = _as_arrays(records, q, h)
    if len(cells) == 0:
        return 0.0

    def partial(sl: slice) -> float:
        return float(np.sum(location_bounds(cells.take(sl), table.take(sl), w, h.sigma_xor)))

    parts = map_chunks(partial, len(cells), worker_count(h.workers), ordered=h.deterministic)
    return float(sum(parts))


def posterior_logit_T(
    rec: LocationRecord, node: NodeKind, q: PosteriorState, w: WeightSet, h: HyperParams
) -> float:
    _check_state(rec, q)
    if node is NodeKind.BD and not rec.has_building:
        raise DomainError(f"cell {rec.cell_index} has no building damage node")
    if node not in (NodeKind.LS, NodeKind.LF, NodeKind.BD):
        raise DomainError(f"{node} has no variational marginal")
    cells, table = _as_arrays([rec], [q], h)
    return float(node_logits(node, cells, table, w, h.sigma_xor)[0])


def weight_gradient(records: RecordsLike, q: PosteriorsLike, w: WeightSet, h: HyperParams) -> BoundGradient:
    cells, table = _as_arrays(records, q, h)
    if len(cells) == 0:
        raise DomainError("weight_gradient needs a non-empty batch")

    def partial(sl: slice) -> np.ndarray:
        return gradient_sum(cells.take(sl), table.take(sl), w)

    parts = map_chunks(partial, len(cells), worker_count(h.workers), ordered=h.deterministic)
    total = np.zeros(len(WeightSet.field_names()))
    for part in parts:
        total = total + part
    return BoundGradient(total)

"""Node family and conditional distributions of the ground-failure causal graph.

Each location carries a small Bayesian network: landslide (LS) and
liquefaction (LF) driven by prior susceptibility rasters, building damage (BD)
driven by both ground failures where a building footprint exists, the damage
proxy observation Y with every latent node as a parent, and an always-zero
exclusivity node U tying LS and LF together. The bias node X0 is constant 1
and is folded into the bias weights.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, fields, replace
from typing import Dict, Iterable, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit, log_ndtr
from scipy.stats import norm

from groundfail_svi.errors import DomainError

WE_Y_MIN = 1e-3
Q_MIN = 1e-7
ALPHA_TOLERANCE = 1e-6


def softplus(t):
    """log(1 + e^t) without overflow."""
    return np.logaddexp(0.0, t)


sigmoid = expit


class NodeKind(str, enum.Enum):
    LS = "LandslideLS"
    LF = "LiquefactionLF"
    BD = "BuildingDamageBD"
    Y = "ObservationY"
    U = "ExclusivityU"
    X0 = "BiasX0"


@dataclass(frozen=True)
class WeightSet:
    """Every edge weight, noise scale and bias of the causal graph."""

    w0_ls: float = 0.0
    w0_lf: float = 0.0
    w0_bd: float = 0.0
    wa_ls: float = 0.0
    wa_lf: float = 0.0
    we_ls: float = 0.0
    we_lf: float = 0.0
    we_bd: float = 0.0
    w_ls_bd: float = 0.0
    w_lf_bd: float = 0.0
    w0_y: float = 0.0
    w_ls_y: float = 0.0
    w_lf_y: float = 0.0
    w_bd_y: float = 0.0
    we_y: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            value = float(getattr(self, f.name))
            if not math.isfinite(value):
                raise DomainError(f"weight {f.name} must be finite, got {value}")
            object.__setattr__(self, f.name, value)
        if self.we_y < WE_Y_MIN:
            raise DomainError(f"we_y must be >= {WE_Y_MIN}, got {self.we_y}")
        if self.w0_y > 0.0:
            raise DomainError(f"w0_y must be <= 0, got {self.w0_y}")
        for name in ("we_ls", "we_lf", "we_bd"):
            if getattr(self, name) < 0.0:
                raise DomainError(f"{name} must be >= 0, got {getattr(self, name)}")

    @classmethod
    def initial(cls) -> "WeightSet":
        """Prior passthrough for ground failures, weak positive DPM coupling."""
        return cls(
            w0_ls=0.0, w0_lf=0.0, w0_bd=0.0,
            wa_ls=1.0, wa_lf=1.0,
            we_ls=0.1, we_lf=0.1, we_bd=0.1,
            w_ls_bd=0.5, w_lf_bd=0.5,
            w0_y=-0.1, w_ls_y=0.5, w_lf_y=0.5, w_bd_y=0.5,
            we_y=1.0,
        )

    @classmethod
    def field_names(cls) -> Tuple[str, ...]:
        return tuple(f.name for f in fields(cls))

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "WeightSet":
        names = cls.field_names()
        if len(values) != len(names):
            raise DomainError(f"expected {len(names)} weights, got {len(values)}")
        return cls(**{name: float(v) for name, v in zip(names, values)})

    @classmethod
    def from_mapping(cls, values: Mapping[str, float], base: Optional["WeightSet"] = None) -> "WeightSet":
        base = base if base is not None else cls.initial()
        unknown = set(values) - set(cls.field_names())
        if unknown:
            raise DomainError(f"unknown weight names: {sorted(unknown)}")
        return replace(base, **{k: float(v) for k, v in values.items()})

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in self.field_names()], dtype=float)

    def as_dict(self) -> Dict[str, float]:
        return {name: getattr(self, name) for name in self.field_names()}


def project_weights(values: np.ndarray) -> np.ndarray:
    """Clip a raw weight vector onto the admissible set."""
    out = np.array(values, dtype=float, copy=True)
    idx = {name: i for i, name in enumerate(WeightSet.field_names())}
    out[idx["we_y"]] = max(out[idx["we_y"]], WE_Y_MIN)
    out[idx["w0_y"]] = min(out[idx["w0_y"]], 0.0)
    for name in ("we_ls", "we_lf", "we_bd"):
        out[idx[name]] = max(out[idx[name]], 0.0)
    return out


# lower bounds per coordinate, used by one-sided finite differences
def weight_lower_bounds() -> np.ndarray:
    names = WeightSet.field_names()
    lower = np.full(len(names), -np.inf)
    for i, name in enumerate(names):
        if name == "we_y":
            lower[i] = WE_Y_MIN
        elif name in ("we_ls", "we_lf", "we_bd"):
            lower[i] = 0.0
    return lower


def weight_upper_bounds() -> np.ndarray:
    names = WeightSet.field_names()
    upper = np.full(len(names), np.inf)
    upper[names.index("w0_y")] = 0.0
    return upper


@dataclass(frozen=True)
class HyperParams:
    sigma_xor: float = 0.1
    delta: float = 1e-4
    rho: float = 1e-3
    batch_size: int = 256
    e_sweeps_max: int = 20
    e_tol: float = 1e-6
    max_epochs: int = 100
    seed: int = 0
    rho_decay: bool = False
    conv_window: int = 5
    conv_rel_tol: float = 1e-6
    prune: bool = False
    y_floor: Optional[float] = None
    alpha_floor: float = 1e-3
    deterministic: bool = True
    workers: Optional[int] = None
    divergence_tol: float = 1e-3
    max_rho_halvings: int = 20

    def __post_init__(self):
        # inf switches the exclusivity coupling off entirely
        if not (0.0 < self.sigma_xor <= 1.0 or self.sigma_xor == math.inf):
            raise DomainError(f"sigma_xor must lie in (0, 1], got {self.sigma_xor}")
        if not 0.0 < self.delta <= 0.01:
            raise DomainError(f"delta must lie in (0, 0.01], got {self.delta}")
        if not (self.rho >= 0.0 and math.isfinite(self.rho)):
            raise DomainError(f"rho must be a finite non-negative number, got {self.rho}")
        for name in ("batch_size", "e_sweeps_max", "max_epochs"):
            if int(getattr(self, name)) < 1:
                raise DomainError(f"{name} must be a positive integer")
        if self.e_tol <= 0.0:
            raise DomainError("e_tol must be > 0")
        if self.seed < 0:
            raise DomainError("seed must be unsigned")
        if self.conv_window < 2:
            raise DomainError("conv_window must be >= 2")
        if self.workers is not None and self.workers < 1:
            raise DomainError("workers must be >= 1")
        if not (self.divergence_tol > 0.0 and math.isfinite(self.divergence_tol)):
            raise DomainError(f"divergence_tol must be a finite positive number, got {self.divergence_tol}")
        if self.max_rho_halvings < 0:
            raise DomainError("max_rho_halvings must be >= 0")

    @property
    def effective_y_floor(self) -> float:
        return self.delta if self.y_floor is None else self.y_floor


@dataclass(frozen=True)
class LocationRecord:
    """Observations and priors of one grid cell."""

    cell_index: Tuple[int, int]
    y: float
    alpha_ls: float
    alpha_lf: float
    has_building: bool = False
    valid: bool = True

    def __post_init__(self):
        if not self.valid:
            return
        for name in ("y", "alpha_ls", "alpha_lf"):
            value = getattr(self, name)
            if not math.isfinite(value):
                raise DomainError(f"{name} of a valid record must be finite")
        if not 0.0 < self.y <= 1.0:
            raise DomainError(f"y must lie in [delta, 1], got {self.y}")
        for name in ("alpha_ls", "alpha_lf"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise DomainError(f"{name} must lie in [0, 1], got {getattr(self, name)}")

    @classmethod
    def from_raw(
        cls,
        cell_index: Tuple[int, int],
        y: Optional[float],
        alpha_ls: Optional[float],
        alpha_lf: Optional[float],
        has_building: bool,
        delta: float,
    ) -> "LocationRecord":
        """Build a record from ingest values; None or NaN marks NODATA."""
        raw = (y, alpha_ls, alpha_lf)
        if any(v is None or not math.isfinite(v) for v in raw):
            nan = float("nan")
            return cls(cell_index, nan, nan, nan, bool(has_building), valid=False)
        alphas = []
        for name, value in (("alpha_ls", alpha_ls), ("alpha_lf", alpha_lf)):
            if value < -ALPHA_TOLERANCE or value > 1.0 + ALPHA_TOLERANCE:
                raise DomainError(f"{name}={value} at cell {cell_index} is not a probability")
            alphas.append(min(max(float(value), 0.0), 1.0))
        return cls(
            cell_index,
            min(max(float(y), delta), 1.0),
            alphas[0],
            alphas[1],
            bool(has_building),
            valid=True,
        )


@dataclass(frozen=True)
class LocationGraph:
    nodes: frozenset
    edges: Tuple[Tuple[str, str], ...]
    y_parents: Tuple[NodeKind, ...]


def latent_logit(
    bias_w: float,
    noise_w: float,
    noise_value: float,
    parent_terms: Iterable[Tuple[float, float]] = (),
) -> float:
    """Log-odds of a latent node given its parents and noise draw."""
    return noise_w * noise_value + bias_w + sum(weight * state for weight, state in parent_terms)


def latent_activation_prob(logit: float, state: int) -> float:
    if state not in (0, 1):
        raise DomainError(f"state must be 0 or 1, got {state}")
    p_on = float(expit(logit))
    return p_on if state == 1 else 1.0 - p_on


def dpm_mean(w: WeightSet, x_ls, x_lf, x_bd=None):
    """Mean of log(y + delta) given parent states; x_bd None drops the BD edge."""
    mean = w.w0_y + w.w_ls_y * x_ls + w.w_lf_y * x_lf
    if x_bd is not None:
        mean = mean + w.w_bd_y * x_bd
    return mean


def dpm_log_density(
    y: float,
    parent_states: Tuple[int, int, Optional[int]],
    w: WeightSet,
    delta: float,
    truncated: bool = True,
) -> float:
    """Log density of the damage proxy value under the lognormal link.

    When truncated, the density is renormalised to the support y <= 1.
    """
    if not delta <= y <= 1.0:
        raise DomainError(f"y={y} outside [{delta}, 1]")
    x_ls, x_lf, x_bd = parent_states
    z = math.log(y + delta)
    mean = dpm_mean(w, x_ls, x_lf, x_bd)
    log_density = float(norm.logpdf(z, loc=mean, scale=w.we_y)) - z
    if truncated:
        upper = math.log(1.0 + delta)
        log_density -= float(log_ndtr((upper - mean) / w.we_y))
    return log_density


def xor_log_potential(u: float, x_ls: int, x_lf: int, sigma: float) -> float:
    """Gaussian relaxation of the exclusivity constraint."""
    if not sigma > 0.0:
        raise DomainError(f"sigma must be > 0, got {sigma}")
    return -math.log(math.sqrt(2.0 * math.pi) * sigma) - (u - x_ls * x_lf) ** 2 / (2.0 * sigma ** 2)


def build_location_graph(rec: LocationRecord) -> LocationGraph:
    if not rec.valid:
        raise DomainError(f"cell {rec.cell_index} is invalid and has no graph")
    nodes = {NodeKind.LS, NodeKind.LF, NodeKind.Y, NodeKind.U, NodeKind.X0}
    edges = [
        ("alpha_ls", NodeKind.LS.value),
        ("alpha_lf", NodeKind.LF.value),
        (NodeKind.LS.value, NodeKind.Y.value),
        (NodeKind.LF.value, NodeKind.Y.value),
        (NodeKind.LS.value, NodeKind.U.value),
        (NodeKind.LF.value, NodeKind.U.value),
    ]
    y_parents = [NodeKind.LS, NodeKind.LF]
    if rec.has_building:
        nodes.add(NodeKind.BD)
        edges += [
            (NodeKind.LS.value, NodeKind.BD.value),
            (NodeKind.LF.value, NodeKind.BD.value),
            (NodeKind.BD.value, NodeKind.Y.value),
        ]
        y_parents.append(NodeKind.BD)
    return LocationGraph(
        nodes=frozenset(nodes),
        edges=tuple(edges),
        y_parents=tuple(y_parents),
    )

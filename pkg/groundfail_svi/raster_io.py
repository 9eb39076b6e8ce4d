"""ASCII-grid rasters, point inventories and the per-cell dataset.

Rasters are held as 2-D float arrays with row 0 the northernmost row and NaN
marking NODATA; the file's NODATA sentinel lives in the GridSpec.
"""

from __future__ import annotations

import enum
import logging
import math
import os
import re
from dataclasses import dataclass
from typing import Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from groundfail_svi.errors import DomainError, GridMismatchError, InputIOError, RasterFormatError
from groundfail_svi.model_core import ALPHA_TOLERANCE, LocationRecord

logger = logging.getLogger(__name__)

HEADER_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value")
HEADER_LABELS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "NODATA_value")
_TOKEN = re.compile(r"\S+")
_GRID_TOL = 1e-9


@dataclass(frozen=True)
class GridSpec:
    ncols: int
    nrows: int
    xllcorner: float
    yllcorner: float
    cellsize: float
    nodata_value: float = -9999.0

    def __post_init__(self):
        if self.ncols < 1 or self.nrows < 1:
            raise DomainError("grid dimensions must be positive")
        if self.ncols * self.nrows > 2 ** 31:
            raise DomainError("grid has more than 2^31 cells")
        if not self.cellsize > 0:
            raise DomainError(f"cellsize must be > 0, got {self.cellsize}")

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.nrows, self.ncols)

    @property
    def xmax(self) -> float:
        return self.xllcorner + self.ncols * self.cellsize

    @property
    def ytop(self) -> float:
        return self.yllcorner + self.nrows * self.cellsize

    def same_grid(self, other: "GridSpec") -> bool:
        return (
            self.ncols == other.ncols
            and self.nrows == other.nrows
            and math.isclose(self.xllcorner, other.xllcorner, abs_tol=_GRID_TOL)
            and math.isclose(self.yllcorner, other.yllcorner, abs_tol=_GRID_TOL)
            and math.isclose(self.cellsize, other.cellsize, rel_tol=_GRID_TOL)
        )

    def cell_centers(self) -> Tuple[np.ndarray, np.ndarray]:
        """x and y of every cell centre, each shaped (nrows, ncols)."""
        cols = self.xllcorner + (np.arange(self.ncols) + 0.5) * self.cellsize
        rows = self.ytop - (np.arange(self.nrows) + 0.5) * self.cellsize
        return np.meshgrid(cols, rows)


@dataclass
class Raster:
    spec: GridSpec
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.spec.shape:
            raise DomainError(f"values shaped {self.values.shape}, grid is {self.spec.shape}")
        if np.any(np.isinf(self.values)):
            raise DomainError("raster values must be finite or NODATA")

    @property
    def nodata(self) -> np.ndarray:
        return np.isnan(self.values)

    def valid_values(self) -> np.ndarray:
        return self.values[~self.nodata]


class HazardCategory(str, enum.Enum):
    LANDSLIDE = "landslide"
    LIQUEFACTION = "liquefaction"
    BUILDING_DAMAGE = "building_damage"


@dataclass(frozen=True)
class InventoryPoint:
    lon: float
    lat: float
    category: HazardCategory

    def __post_init__(self):
        object.__setattr__(self, "category", HazardCategory(self.category))


def _parse_number(token: str, path: str, line_no: int, column: int, integer: bool = False):
    try:
        return int(token) if integer else float(token)
    except ValueError:
        kind = "an integer" if integer else "a number"
        raise RasterFormatError(f"expected {kind}, found {token!r}", path, line_no, column) from None


def read_ascii_grid(path: str) -> Raster:
    path = str(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = f.read().splitlines()
    except OSError as exc:
        raise InputIOError(f"cannot read raster {path}: {exc}") from exc

    header = {}
    for i, (key, label) in enumerate(zip(HEADER_KEYS, HEADER_LABELS)):
        line_no = i + 1
        if i >= len(lines):
            raise RasterFormatError(f"missing header key {label}", path, line_no)
        tokens = [(m.group(), m.start() + 1) for m in _TOKEN.finditer(lines[i])]
        if len(tokens) != 2:
            raise RasterFormatError(f"header line must be '<key> <value>', got {lines[i]!r}", path, line_no, 1)
        (found, _), (value, value_col) = tokens
        if found.lower() != key:
            raise RasterFormatError(f"expected header key {label}, found {found!r}", path, line_no, 1)
        header[key] = _parse_number(value, path, line_no, value_col, integer=key in ("ncols", "nrows"))

    try:
        spec = GridSpec(**header)
    except DomainError as exc:
        raise RasterFormatError(str(exc), path, 1) from exc

    body = lines[len(HEADER_KEYS):]
    while body and not body[-1].strip():
        body.pop()
    if len(body) != spec.nrows:
        raise RasterFormatError(
            f"expected {spec.nrows} data rows, found {len(body)}", path, len(HEADER_KEYS) + len(body)
        )

    values = np.empty(spec.shape, dtype=float)
    for r, line in enumerate(body):
        line_no = len(HEADER_KEYS) + r + 1
        tokens = line.split()
        if len(tokens) != spec.ncols:
            raise RasterFormatError(f"row has {len(tokens)} values, expected {spec.ncols}", path, line_no, 1)
        try:
            row = np.array(tokens, dtype=float)
        except ValueError:
            for m in _TOKEN.finditer(line):
                _parse_number(m.group(), path, line_no, m.start() + 1)
            raise
        if not np.all(np.isfinite(row)):
            bad = next(m for m in _TOKEN.finditer(line) if not math.isfinite(float(m.group())))
            raise RasterFormatError(f"non-finite value {bad.group()!r}", path, line_no, bad.start() + 1)
        values[r] = row

    values[values == spec.nodata_value] = np.nan
    return Raster(spec, values)


def _format_scalar(value: float) -> str:
    value = float(value)
    return str(int(value)) if value.is_integer() else repr(value)


def write_ascii_grid(raster: Raster, path: str, decimals: int = 12) -> None:
    spec = raster.spec
    header_values = (spec.ncols, spec.nrows, spec.xllcorner, spec.yllcorner, spec.cellsize, spec.nodata_value)
    nodata = _format_scalar(spec.nodata_value)
    out = [f"{label:<14}{_format_scalar(v)}" for label, v in zip(HEADER_LABELS, header_values)]
    for row in raster.values:
        out.append(" ".join(nodata if math.isnan(v) else f"{v:.{decimals}f}" for v in row))
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write("\n".join(out) + "\n")
    except OSError as exc:
        raise InputIOError(f"cannot write raster {path}: {exc}") from exc


def align_to_grid(src: Raster, target: GridSpec) -> Raster:
    """Nearest-neighbour resampling of src onto target; outside cells become NODATA."""
    s = src.spec
    if target.xmax <= s.xllcorner or target.xllcorner >= s.xmax or target.ytop <= s.yllcorner or target.yllcorner >= s.ytop:
        raise GridMismatchError("source and target extents are disjoint")
    if s.same_grid(target):
        return Raster(target, src.values.copy())

    x, y = target.cell_centers()
    col = np.floor((x - s.xllcorner) / s.cellsize).astype(np.int64)
    row = np.floor((s.ytop - y) / s.cellsize).astype(np.int64)
    inside = (col >= 0) & (col < s.ncols) & (row >= 0) & (row < s.nrows)
    out = np.full(target.shape, np.nan)
    out[inside] = src.values[row[inside], col[inside]]
    return Raster(target, out)


def normalize_dpm(
    raw: Raster,
    delta: float,
    assume_normalized: bool = False,
    bounds: Optional[Tuple[float, float]] = None,
) -> Raster:
    """Rescale damage-proxy values to [0, 1] and floor them at delta."""
    valid = raw.valid_values()
    if valid.size == 0:
        raise DomainError("damage proxy raster has no data cells")
    values = raw.values.copy()
    if not assume_normalized:
        lo, hi = bounds if bounds is not None else (float(valid.min()), float(valid.max()))
        if not hi > lo:
            raise DomainError(
                "damage proxy raster has zero range; pass explicit bounds or set assume_normalized"
            )
        values = (values - lo) / (hi - lo)
    return Raster(raw.spec, np.clip(values, delta, 1.0))


def _point_cells(points: Sequence[InventoryPoint], target: GridSpec) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    lon = np.array([p.lon for p in points], dtype=float)
    lat = np.array([p.lat for p in points], dtype=float)
    col = np.floor((lon - target.xllcorner) / target.cellsize).astype(np.int64)
    row = np.floor((target.ytop - lat) / target.cellsize).astype(np.int64)
    inside = (col >= 0) & (col < target.ncols) & (row >= 0) & (row < target.nrows)
    return row, col, inside


def points_outside(points: Sequence[InventoryPoint], target: GridSpec) -> int:
    if not points:
        return 0
    return int(np.sum(~_point_cells(points, target)[2]))


def rasterize_points(points: Sequence[InventoryPoint], target: GridSpec, category) -> Raster:
    """Binary raster: 1 where at least one point of the category falls in the cell.

    Cells are half-open with the west and north edges inclusive.
    """
    category = HazardCategory(category)
    selected = [p for p in points if p.category is category]
    out = np.zeros(target.shape)
    if selected:
        row, col, inside = _point_cells(selected, target)
        out[row[inside], col[inside]] = 1.0
        outside = int(np.sum(~inside))
        if outside:
            logger.warning("%d %s points fall outside the grid", outside, category.value)
    return Raster(target, out)


def read_inventory_csv(path: str) -> List[InventoryPoint]:
    try:
        frame = pd.read_csv(path, dtype={"category": str}, keep_default_na=False)
    except FileNotFoundError as exc:
        raise InputIOError(f"cannot read inventory {path}: {exc}") from exc
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise InputIOError(f"malformed inventory {path}: {exc}") from exc
    if list(frame.columns) != ["lon", "lat", "category"]:
        raise InputIOError(f"inventory {path} must have header lon,lat,category, got {list(frame.columns)}")
    points = []
    for i, row in enumerate(frame.itertuples(index=False), start=2):
        try:
            points.append(InventoryPoint(float(row.lon), float(row.lat), row.category))
        except ValueError as exc:
            raise InputIOError(f"{path}:{i}: {exc}") from exc
    return points


def write_inventory_csv(points: Iterable[InventoryPoint], path: str) -> None:
    frame = pd.DataFrame(
        [(p.lon, p.lat, p.category.value) for p in points], columns=["lon", "lat", "category"]
    )
    frame.to_csv(path, index=False, lineterminator="\n")


@dataclass
class LocationTable:
    """One entry per DPM cell, flattened row-major."""

    grid: GridSpec
    y: np.ndarray
    alpha_ls: np.ndarray
    alpha_lf: np.ndarray
    has_building: np.ndarray
    valid: np.ndarray

    def __len__(self) -> int:
        return len(self.y)

    def cell_index(self, i: int) -> Tuple[int, int]:
        return divmod(int(i), self.grid.ncols)

    def record(self, i: int) -> LocationRecord:
        if not self.valid[i]:
            nan = float("nan")
            return LocationRecord(self.cell_index(i), nan, nan, nan, bool(self.has_building[i]), valid=False)
        return LocationRecord(
            self.cell_index(i),
            float(self.y[i]),
            float(self.alpha_ls[i]),
            float(self.alpha_lf[i]),
            bool(self.has_building[i]),
        )

    def __iter__(self) -> Iterator[LocationRecord]:
        return (self.record(i) for i in range(len(self)))

    def to_raster(self, flat: np.ndarray) -> Raster:
        return Raster(self.grid, np.asarray(flat, dtype=float).reshape(self.grid.shape))


def build_dataset(
    dpm: Raster,
    prior_ls: Raster,
    prior_lf: Raster,
    footprint: Optional[Raster] = None,
    delta: float = 1e-4,
) -> LocationTable:
    grid = dpm.spec
    for name, raster in (("prior_ls", prior_ls), ("prior_lf", prior_lf), ("footprint", footprint)):
        if raster is not None and not raster.spec.same_grid(grid):
            raise GridMismatchError(f"{name} is not aligned to the damage proxy grid")

    y = dpm.values.ravel()
    a_ls = prior_ls.values.ravel()
    a_lf = prior_lf.values.ravel()
    valid = ~(np.isnan(y) | np.isnan(a_ls) | np.isnan(a_lf))
    for name, alpha in (("alpha_ls", a_ls), ("alpha_lf", a_lf)):
        bad = valid & ((alpha < -ALPHA_TOLERANCE) | (alpha > 1.0 + ALPHA_TOLERANCE))
        if np.any(bad):
            i = int(np.flatnonzero(bad)[0])
            raise DomainError(f"{name}={alpha[i]} at cell {divmod(i, grid.ncols)} is not a probability")

    if footprint is None:
        has_building = np.zeros(len(y), dtype=bool)
    else:
        fp = footprint.values.ravel()
        has_building = np.where(np.isnan(fp), False, fp > 0)

    nan = np.full(len(y), np.nan)
    table = LocationTable(
        grid=grid,
        y=np.where(valid, np.clip(y, delta, 1.0), nan),
        alpha_ls=np.where(valid, np.clip(a_ls, 0.0, 1.0), nan),
        alpha_lf=np.where(valid, np.clip(a_lf, 0.0, 1.0), nan),
        has_building=has_building,
        valid=valid,
    )
    logger.info("dataset: %d cells, %d valid, %d with buildings", len(table), int(valid.sum()), int(has_building.sum()))
    return table


def ensure_dir(path: str) -> str:
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise InputIOError(f"cannot create output directory {path}: {exc}") from exc
    return path

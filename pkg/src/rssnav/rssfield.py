"""Per-cell received signal strength maps.

A field is either synthesized from a floor plan (free-space path loss plus a
fixed penalty for every wall cell on the line of sight) or loaded from a
text file produced elsewhere, e.g. by an external ray tracer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .gridworld import CellIndex, FloorPlan, is_traversable

__all__ = [
    "SourceSpec",
    "PropagationParams",
    "RssField",
    "FieldFormatError",
    "DimensionMismatch",
    "MalformedNumber",
    "NonPositiveDistance",
    "fspl_rss",
    "supercover_cells",
    "count_wall_crossings",
    "synthesize_field",
    "count_aliased_cells",
    "save_field",
    "load_field",
    "write_field",
    "read_field",
]

# 20*log10(4*pi/c) with c = 299792458 m/s
FSPL_CONSTANT_DB = -147.55
QUANTUM_DBM = 1e-6


class NonPositiveDistance(ValueError):
    pass


class FieldFormatError(ValueError):
    pass


class DimensionMismatch(FieldFormatError):
    pass


class MalformedNumber(FieldFormatError):
    pass


@dataclass(frozen=True)
class SourceSpec:
    position: CellIndex
    tx_power_dbm: float = 25.0
    frequency_hz: float = 2.4e9
    # source at 1.5 m, sensing plane at 2 m
    height_offset_m: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "position", CellIndex(*self.position))
        if not self.frequency_hz > 0:
            raise ValueError("frequency_hz must be positive")
        if self.height_offset_m < 0:
            raise ValueError("height_offset_m must be non-negative")


@dataclass(frozen=True)
class PropagationParams:
    wall_loss_db: float = 6.0
    noise_floor_dbm: float = -120.0

    def __post_init__(self):
        if self.wall_loss_db < 0:
            raise ValueError("wall_loss_db must be non-negative")


@dataclass(frozen=True)
class RssField:
    """RSS in dBm for every cell of a plan; ``values`` is read-only."""

    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2 or values.size == 0:
            raise DimensionMismatch("field must be a non-empty 2-D grid")
        if not np.all(np.isfinite(values)):
            raise MalformedNumber("field values must be finite")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def __getitem__(self, cell) -> float:
        return float(self.values[cell[0], cell[1]])

    def matches(self, plan: FloorPlan) -> bool:
        return self.shape == plan.shape


def fspl_rss(distance_m: float, frequency_hz: float, tx_power_dbm: float) -> float:
    """Received power under Friis free-space loss with 0 dBi antennas."""
    if not distance_m > 0:
        raise NonPositiveDistance(f"distance must be positive, got {distance_m}")
    loss = 20.0 * math.log10(distance_m) + 20.0 * math.log10(frequency_hz) + FSPL_CONSTANT_DB
    return tx_power_dbm - loss


def supercover_cells(a, b) -> list[CellIndex]:
    """Every cell touched by the segment between the centres of ``a`` and ``b``.

    Cells whose corner the segment merely grazes are included.  The result
    is ordered from ``a`` to ``b`` and contains both endpoints.
    """
    r, c = a
    dr, dc = b[0] - r, b[1] - c
    nr, nc = abs(dr), abs(dc)
    sr = (dr > 0) - (dr < 0)
    sc = (dc > 0) - (dc < 0)
    cells = [CellIndex(r, c)]
    ir = ic = 0
    while ir < nr or ic < nc:
        # sign tells whether the next vertical or horizontal cell edge comes first
        decision = (1 + 2 * ic) * nr - (1 + 2 * ir) * nc
        if decision == 0:
            cells.append(CellIndex(r, c + sc))
            cells.append(CellIndex(r + sr, c))
            r += sr
            c += sc
            ir += 1
            ic += 1
        elif decision < 0:
            c += sc
            ic += 1
        else:
            r += sr
            ir += 1
        cells.append(CellIndex(r, c))
    return cells


def count_wall_crossings(plan: FloorPlan, a, b) -> int:
    """Blocked cells on the centre-to-centre segment, endpoints excluded."""
    a, b = CellIndex(*a), CellIndex(*b)
    return sum(
        1
        for cell in supercover_cells(a, b)
        if cell != a and cell != b and plan.blocked[cell.row, cell.col]
    )


def synthesize_field(
    plan: FloorPlan, source: SourceSpec, params: PropagationParams | None = None
) -> RssField:
    params = params or PropagationParams()
    if not is_traversable(plan, source.position):
        raise ValueError(f"source {source.position} is not a free cell")
    src = source.position
    values = np.full(plan.shape, params.noise_floor_dbm, dtype=np.float64)
    for cell in plan.free_cells():
        planar = plan.center_distance_m(cell, src)
        d = math.sqrt(planar * planar + source.height_offset_m ** 2)
        if d == 0.0:
            d = 0.1
        rss = fspl_rss(d, source.frequency_hz, source.tx_power_dbm)
        rss -= count_wall_crossings(plan, cell, src) * params.wall_loss_db
        values[cell] = max(rss, params.noise_floor_dbm)
    return RssField(values)


def count_aliased_cells(plan: FloorPlan, field: RssField) -> int:
    """Free cells whose RSS (at 1e-6 dBm resolution) another free cell shares."""
    keys = np.round(field.values[~plan.blocked] / QUANTUM_DBM)
    _, counts = np.unique(keys, return_counts=True)
    return int(counts[counts > 1].sum())


def save_field(field: RssField) -> str:
    lines = [f"{field.rows} {field.cols}"]
    for row in field.values:
        lines.append(",".join(f"{v:.6f}" for v in row))
    return "\n".join(lines) + "\n"


def _parse_float(token: str, where: str) -> float:
    try:
        value = float(token)
    except ValueError:
        raise MalformedNumber(f"{where}: cannot parse {token!r}") from None
    if not math.isfinite(value):
        raise MalformedNumber(f"{where}: non-finite value {token!r}")
    return value


def load_field(document: str) -> RssField:
    lines = [ln for ln in document.replace("\r\n", "\n").split("\n") if ln.strip()]
    if not lines:
        raise FieldFormatError("empty field document")
    header = lines[0].split()
    if len(header) != 2:
        raise FieldFormatError(f"bad header {lines[0]!r}; expected 'rows cols'")
    try:
        rows, cols = int(header[0]), int(header[1])
    except ValueError:
        raise MalformedNumber(f"bad header {lines[0]!r}") from None
    if rows <= 0 or cols <= 0:
        raise DimensionMismatch(f"header declares {rows}x{cols}")
    body = lines[1:]
    if len(body) != rows:
        raise DimensionMismatch(f"header declares {rows} rows, found {len(body)}")
    values = np.empty((rows, cols))
    for r, line in enumerate(body):
        tokens = line.split(",")
        if len(tokens) != cols:
            raise DimensionMismatch(f"row {r} has {len(tokens)} values, expected {cols}")
        for c, tok in enumerate(tokens):
            values[r, c] = _parse_float(tok.strip(), f"row {r}, col {c}")
    return RssField(values)


def write_field(field: RssField, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(save_field(field))


def read_field(path) -> RssField:
    return load_field(Path(path).read_text(encoding="utf-8"))

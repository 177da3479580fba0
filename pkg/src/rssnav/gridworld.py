"""Occupancy-grid floor plans and 8-direction agent motion.

Plans are written as ASCII text, one line per grid row, row 0 at the top::

    S..#....
    ...#..T.
    ........

``#`` is a wall, ``.`` free space, ``S`` the start cell and ``T`` the cell
holding the RF source.  Cells are addressed as ``(row, col)``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

__all__ = [
    "Action",
    "ACTIONS",
    "CellIndex",
    "FloorPlan",
    "FloorPlanError",
    "RaggedRows",
    "MissingMarker",
    "InvalidChar",
    "parse_floor_plan",
    "load_floor_plan",
    "format_floor_plan",
    "is_traversable",
    "apply_action",
    "allowed_actions",
    "move_table",
]


class FloorPlanError(ValueError):
    """Base class for malformed plan documents."""


class RaggedRows(FloorPlanError):
    pass


class MissingMarker(FloorPlanError):
    pass


class InvalidChar(FloorPlanError):
    pass


class CellIndex(NamedTuple):
    row: int
    col: int


class Action(enum.IntEnum):
    """Compass moves, clockwise from north.  Values index Q-table columns."""

    N = 0
    NE = 1
    E = 2
    SE = 3
    S = 4
    SW = 5
    W = 6
    NW = 7

    @property
    def drow(self) -> int:
        return _OFFSETS[self][0]

    @property
    def dcol(self) -> int:
        return _OFFSETS[self][1]

    @property
    def is_diagonal(self) -> bool:
        return self.drow != 0 and self.dcol != 0

    @property
    def opposite(self) -> "Action":
        return Action((self.value + 4) % 8)


_OFFSETS = {
    Action.N: (-1, 0),
    Action.NE: (-1, 1),
    Action.E: (0, 1),
    Action.SE: (1, 1),
    Action.S: (1, 0),
    Action.SW: (1, -1),
    Action.W: (0, -1),
    Action.NW: (-1, -1),
}

ACTIONS: tuple[Action, ...] = tuple(Action)


@dataclass(frozen=True)
class FloorPlan:
    """Immutable occupancy grid.

    ``blocked`` is a read-only boolean array of shape ``(rows, cols)``.
    """

    blocked: np.ndarray
    start: CellIndex
    target: CellIndex
    cell_size_m: float = 1.0

    def __post_init__(self):
        blocked = np.array(self.blocked, dtype=bool)
        if blocked.ndim != 2 or blocked.size == 0:
            raise FloorPlanError("plan must be a non-empty 2-D grid")
        blocked.setflags(write=False)
        object.__setattr__(self, "blocked", blocked)
        object.__setattr__(self, "start", CellIndex(*self.start))
        object.__setattr__(self, "target", CellIndex(*self.target))
        if not self.cell_size_m > 0:
            raise FloorPlanError("cell_size_m must be positive")
        for name in ("start", "target"):
            if not is_traversable(self, getattr(self, name)):
                raise FloorPlanError(f"{name} {getattr(self, name)} is not a free cell")

    @property
    def rows(self) -> int:
        return self.blocked.shape[0]

    @property
    def cols(self) -> int:
        return self.blocked.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.blocked.shape

    def in_bounds(self, cell) -> bool:
        r, c = cell
        return 0 <= r < self.rows and 0 <= c < self.cols

    def free_cells(self) -> list[CellIndex]:
        return [CellIndex(int(r), int(c)) for r, c in zip(*np.nonzero(~self.blocked))]

    def flat(self, cell) -> int:
        return cell[0] * self.cols + cell[1]

    def unflat(self, index: int) -> CellIndex:
        return CellIndex(*divmod(int(index), self.cols))

    def center_distance_m(self, a, b) -> float:
        """Euclidean distance between two cell centres in metres."""
        return self.cell_size_m * float(np.hypot(a[0] - b[0], a[1] - b[1]))

    def mirrored(self, axis: int = 1) -> "FloorPlan":
        """Reflect the plan left-right (``axis=1``) or top-bottom (``axis=0``)."""
        blocked = np.flip(self.blocked, axis=axis)

        def flip(cell):
            r, c = cell
            return (self.rows - 1 - r, c) if axis == 0 else (r, self.cols - 1 - c)

        return FloorPlan(blocked, flip(self.start), flip(self.target), self.cell_size_m)


def parse_floor_plan(text: str, cell_size_m: float = 1.0) -> FloorPlan:
    """Parse an ASCII plan document (LF or CRLF, trailing newline optional)."""
    lines = text.replace("\r\n", "\n").split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or not any(lines):
        raise FloorPlanError("empty floor plan")
    width = len(lines[0])
    for i, line in enumerate(lines):
        if len(line) != width:
            raise RaggedRows(f"row {i} has {len(line)} cells, expected {width}")

    starts, targets = [], []
    blocked = np.zeros((len(lines), width), dtype=bool)
    for r, line in enumerate(lines):
        for c, ch in enumerate(line):
            if ch == "#":
                blocked[r, c] = True
            elif ch == "S":
                starts.append((r, c))
            elif ch == "T":
                targets.append((r, c))
            elif ch != ".":
                raise InvalidChar(f"invalid character {ch!r} at row {r}, col {c}")
    if len(starts) != 1 or len(targets) != 1:
        raise MissingMarker(
            f"expected exactly one S and one T, found {len(starts)} S and {len(targets)} T"
        )
    return FloorPlan(blocked, starts[0], targets[0], cell_size_m)


def load_floor_plan(path, cell_size_m: float = 1.0) -> FloorPlan:
    return parse_floor_plan(Path(path).read_text(encoding="utf-8"), cell_size_m)


def format_floor_plan(plan: FloorPlan) -> str:
    rows = []
    for r in range(plan.rows):
        chars = ["#" if b else "." for b in plan.blocked[r]]
        if r == plan.start.row:
            chars[plan.start.col] = "S"
        if r == plan.target.row:
            chars[plan.target.col] = "T"
        rows.append("".join(chars))
    return "\n".join(rows) + "\n"


def is_traversable(plan: FloorPlan, cell) -> bool:
    r, c = cell
    return 0 <= r < plan.rows and 0 <= c < plan.cols and not plan.blocked[r, c]


def apply_action(plan: FloorPlan, origin, action: Action, step_cells: int = 1) -> CellIndex | None:
    """Move ``step_cells`` cells along ``action``; ``None`` means blocked.

    Every cell on the swept line must be free.  A diagonal sub-step is also
    blocked when either of the two orthogonal cells it squeezes between is
    a wall, so the agent never slips through a wall corner.
    """
    if step_cells < 1:
        raise ValueError("step_cells must be >= 1")
    dr, dc = _OFFSETS[Action(action)]
    r, c = origin
    for _ in range(step_cells):
        if dr and dc and not (
            is_traversable(plan, (r + dr, c)) and is_traversable(plan, (r, c + dc))
        ):
            return None
        r, c = r + dr, c + dc
        if not is_traversable(plan, (r, c)):
            return None
    return CellIndex(r, c)


def allowed_actions(plan: FloorPlan, origin, step_cells: int = 1) -> tuple[Action, ...]:
    """Actions that complete without collision, in compass order."""
    return tuple(a for a in ACTIONS if apply_action(plan, origin, a, step_cells) is not None)


def move_table(plan: FloorPlan, step_cells: int = 1) -> np.ndarray:
    """Destination lookup ``table[flat_cell, action]``; -1 where blocked.

    Rows for wall cells are all -1.
    """
    table = np.full((plan.rows * plan.cols, len(ACTIONS)), -1, dtype=np.int64)
    for cell in plan.free_cells():
        i = plan.flat(cell)
        for a in ACTIONS:
            dest = apply_action(plan, cell, a, step_cells)
            if dest is not None:
                table[i, a] = plan.flat(dest)
    return table

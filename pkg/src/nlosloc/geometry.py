"""Building grids and the geometric primitives derived from them.

Cells are indexed ``(row, col)``; row 0 is the top of the map. Distances are
measured between cell centres and scaled by ``cell_size`` (metres).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from numba import njit

from .errors import InvalidEnvironment, RxInsideBuilding, TxInsideBuilding


class GridPoint(NamedTuple):
    row: int
    col: int


def half_plane_masks(occupancy: np.ndarray, split: str = "lower") -> tuple[np.ndarray, np.ndarray]:
    """Restricted/sensing masks splitting the free cells by grid half.

    ``split="lower"`` puts the emitter region in rows ``N//2..`` and lets
    sensors sit in the upper half.
    """
    occ = np.asarray(occupancy).astype(bool)
    n = occ.shape[0]
    rows = np.arange(n)[:, None] * np.ones((1, occ.shape[1]), dtype=int)
    if split == "lower":
        region = rows >= n // 2
    elif split == "upper":
        region = rows < n // 2
    elif split == "none":
        # emitter may be anywhere; sensors likewise is not a partition, so the
        # restricted set is empty and every free cell is sensable
        region = np.zeros_like(occ)
    else:
        raise InvalidEnvironment(f"unknown split {split!r}")
    restricted = region & ~occ
    sensing = ~region & ~occ
    return restricted.astype(np.uint8), sensing.astype(np.uint8)


def rect_masks(occupancy: np.ndarray, r0: int, c0: int, r1: int, c1: int) -> tuple[np.ndarray, np.ndarray]:
    """Restricted region as the half-open rectangle ``[r0:r1, c0:c1]``."""
    occ = np.asarray(occupancy).astype(bool)
    region = np.zeros_like(occ)
    region[r0:r1, c0:c1] = True
    return (region & ~occ).astype(np.uint8), (~region & ~occ).astype(np.uint8)


@dataclass(frozen=True, eq=False)
class EnvironmentGrid:
    occupancy: np.ndarray
    restricted_mask: np.ndarray
    sensing_mask: np.ndarray
    cell_size: float = 1.0
    building_height: float = 25.0
    antenna_height: float = 1.5

    def __post_init__(self):
        occ = np.asarray(self.occupancy)
        if occ.ndim != 2 or occ.shape[0] != occ.shape[1]:
            raise InvalidEnvironment(f"occupancy must be square, got shape {occ.shape}")
        if not np.isin(occ, (0, 1)).all():
            raise InvalidEnvironment("occupancy entries must be 0 or 1")
        occ = occ.astype(np.uint8)
        restricted = np.asarray(self.restricted_mask).astype(np.uint8)
        sensing = np.asarray(self.sensing_mask).astype(np.uint8)
        if restricted.shape != occ.shape or sensing.shape != occ.shape:
            raise InvalidEnvironment("region masks must match the occupancy shape")
        if np.any(restricted & sensing):
            raise InvalidEnvironment("restricted and sensing regions overlap")
        free = occ == 0
        if np.any((restricted | sensing).astype(bool) & ~free):
            raise InvalidEnvironment("region masks may only contain free cells")
        if np.any(free & ~(restricted | sensing).astype(bool)):
            raise InvalidEnvironment("restricted and sensing regions must cover every free cell")
        if not (self.building_height > self.antenna_height >= 0):
            raise InvalidEnvironment("need building_height > antenna_height >= 0")
        if self.cell_size <= 0:
            raise InvalidEnvironment("cell_size must be positive")
        object.__setattr__(self, "occupancy", occ)
        object.__setattr__(self, "restricted_mask", restricted)
        object.__setattr__(self, "sensing_mask", sensing)

    @classmethod
    def from_occupancy(cls, occupancy, split: str = "lower", **kwargs) -> "EnvironmentGrid":
        occ = np.asarray(occupancy).astype(np.uint8)
        restricted, sensing = half_plane_masks(occ, split)
        return cls(occ, restricted, sensing, **kwargs)

    @property
    def n(self) -> int:
        return self.occupancy.shape[0]

    @property
    def free(self) -> np.ndarray:
        return self.occupancy == 0

    @property
    def blocking_height(self) -> float:
        return self.building_height - self.antenna_height

    def is_free(self, p) -> bool:
        r, c = p
        return 0 <= r < self.n and 0 <= c < self.n and self.occupancy[r, c] == 0

    def with_regions(self, restricted, sensing) -> "EnvironmentGrid":
        return EnvironmentGrid(self.occupancy, restricted, sensing, self.cell_size,
                               self.building_height, self.antenna_height)


def _padded(occ: np.ndarray) -> np.ndarray:
    return np.pad(occ.astype(bool), 1, constant_values=False)


def extract_edges(env: EnvironmentGrid) -> set[GridPoint]:
    """Free cells 4-adjacent to at least one building cell."""
    p = _padded(env.occupancy)
    near = p[:-2, 1:-1] | p[2:, 1:-1] | p[1:-1, :-2] | p[1:-1, 2:]
    rr, cc = np.nonzero(near & env.free)
    return {GridPoint(int(r), int(c)) for r, c in zip(rr, cc)}


def extract_vertices(env: EnvironmentGrid) -> set[GridPoint]:
    """Free cells sitting diagonally off a building corner.

    Every 2x2 window (including windows hanging over the map border, where the
    outside counts as free) is classified by its occupied-cell count: one
    occupied cell is a convex corner and marks the opposite free cell; three
    occupied cells is a concave corner and marks the single free cell.
    """
    occ = env.occupancy.astype(bool)
    n = env.n
    p = _padded(occ)
    # window anchored at padded (i, j) covers padded rows i..i+1, cols j..j+1
    a, b = p[:-1, :-1], p[:-1, 1:]
    c, d = p[1:, :-1], p[1:, 1:]
    count = a.astype(int) + b + c + d
    out: set[GridPoint] = set()
    for offs, here in (((0, 0), a), ((0, 1), b), ((1, 0), c), ((1, 1), d)):
        # convex: only the diagonal partner of `here` is occupied
        diag = {(0, 0): d, (0, 1): c, (1, 0): b, (1, 1): a}[offs]
        hit = ((count == 1) & diag) | ((count == 3) & ~here)
        ii, jj = np.nonzero(hit)
        for i, j in zip(ii, jj):
            r, col = i + offs[0] - 1, j + offs[1] - 1
            if 0 <= r < n and 0 <= col < n and not occ[r, col]:
                out.add(GridPoint(int(r), int(col)))
    return out


def points_to_mask(points, n: int) -> np.ndarray:
    m = np.zeros((n, n), dtype=np.uint8)
    for r, c in points:
        m[r, c] = 1
    return m


def supercover(p0, p1) -> list[tuple[int, int]]:
    """Every cell the segment between two cell centres touches, in path order.

    Where the segment passes exactly through a cell corner both side cells are
    emitted, so a ray can never slip between two diagonally touching cells.
    """
    r, c = int(p0[0]), int(p0[1])
    dr, dc = int(p1[0]) - r, int(p1[1]) - c
    nr, nc = abs(dr), abs(dc)
    sr = (dr > 0) - (dr < 0)
    sc = (dc > 0) - (dc < 0)
    cells = [(r, c)]
    ir = ic = 0
    while ir < nr or ic < nc:
        decision = (1 + 2 * ir) * nc - (1 + 2 * ic) * nr
        if decision == 0:
            cells.append((r + sr, c))
            cells.append((r, c + sc))
            r += sr
            c += sc
            ir += 1
            ic += 1
        elif decision < 0:
            r += sr
            ir += 1
        else:
            c += sc
            ic += 1
        cells.append((r, c))
    return cells


@dataclass(frozen=True)
class ObstructionSegment:
    entry: GridPoint
    exit: GridPoint
    entry_distance: float  # metres from tx
    exit_distance: float
    height: float  # above the tx-rx line of sight

    @property
    def distance(self) -> float:
        """Position of the equivalent knife edge (segment midpoint)."""
        return 0.5 * (self.entry_distance + self.exit_distance)


@dataclass(frozen=True)
class ObstructionProfile:
    segments: list[ObstructionSegment] = field(default_factory=list)
    total_crossed_cells: int = 0
    path_length: float = 0.0

    @property
    def clear(self) -> bool:
        return not self.segments

    def knife_edges(self) -> list[tuple[float, float, float]]:
        """``(d1, d2, h)`` for each segment, ordered from the transmitter."""
        return [(s.distance, self.path_length - s.distance, s.height) for s in self.segments]


def trace_obstructions(env: EnvironmentGrid, tx, rx) -> ObstructionProfile:
    tx = GridPoint(*map(int, tx))
    rx = GridPoint(*map(int, rx))
    if not env.is_free(tx):
        raise TxInsideBuilding(f"transmitter {tuple(tx)} is not a free cell")
    if not env.is_free(rx):
        raise RxInsideBuilding(f"receiver {tuple(rx)} is not a free cell")
    if tx == rx:
        raise InvalidEnvironment("transmitter and receiver coincide")
    return _trace(env.occupancy, tx, rx, env.cell_size, env.blocking_height)


def _trace(occ: np.ndarray, tx, rx, cell_size: float, height: float) -> ObstructionProfile:
    dr, dc = rx[0] - tx[0], rx[1] - tx[1]
    norm2 = float(dr * dr + dc * dc)
    length = np.sqrt(norm2) * cell_size
    segments = []
    crossed = 0
    run: list[tuple[int, int]] = []

    def close_run():
        if not run:
            return
        proj = [((r - tx[0]) * dr + (c - tx[1]) * dc) / norm2 * length for r, c in run]
        segments.append(ObstructionSegment(GridPoint(*run[0]), GridPoint(*run[-1]),
                                           float(min(proj)), float(max(proj)), height))
        run.clear()

    for cell in supercover(tx, rx):
        if occ[cell]:
            run.append(cell)
            crossed += 1
        else:
            close_run()
    close_run()
    # corner pairs may emit a run out of distance order; keep the profile sorted
    segments.sort(key=lambda s: s.distance)
    return ObstructionProfile(segments, crossed, float(length))



@njit(cache=True)
def _blocked(occ, r, c, r1, c1):
    dr, dc = r1 - r, c1 - c
    nr, nc = abs(dr), abs(dc)
    sr = (dr > 0) - (dr < 0)
    sc = (dc > 0) - (dc < 0)
    ir = ic = 0
    while ir < nr or ic < nc:
        decision = (1 + 2 * ir) * nc - (1 + 2 * ic) * nr
        if decision == 0:
            if occ[r + sr, c] or occ[r, c + sc]:
                return True
            r += sr
            c += sc
            ir += 1
            ic += 1
        elif decision < 0:
            r += sr
            ir += 1
        else:
            c += sc
            ic += 1
        if occ[r, c]:
            return True
    return False


@njit(cache=True)
def _los_table(occ, starts, ends):
    out = np.ones((starts.shape[0], ends.shape[0]), dtype=np.bool_)
    for i in range(starts.shape[0]):
        for j in range(ends.shape[0]):
            if _blocked(occ, starts[i, 0], starts[i, 1], ends[j, 0], ends[j, 1]):
                out[i, j] = False
    return out


def line_of_sight(occupancy: np.ndarray, starts, ends) -> np.ndarray:
    """Clear-path table between two sets of cell centres.

    ``starts`` is (A, 2) and ``ends`` is (B, 2); entry (i, j) is True when the
    supercover walk from ``starts[i]`` to ``ends[j]`` meets no building cell.
    Endpoints themselves are not tested except as part of the walk.
    """
    starts = np.atleast_2d(np.asarray(starts, dtype=np.int64))
    ends = np.atleast_2d(np.asarray(ends, dtype=np.int64))
    occ = np.ascontiguousarray(np.asarray(occupancy, dtype=np.uint8))
    if starts.size == 0 or ends.size == 0:
        return np.ones((len(starts), len(ends)), dtype=bool)
    return _los_table(occ, starts, ends)

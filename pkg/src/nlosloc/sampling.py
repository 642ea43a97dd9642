"""Sampling masks, noisy RSS measurements and the conditioning tensor."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BudgetTooLarge, EmptyMeasurements, MaskOutsideMap, ShapeMismatch
from .geometry import EnvironmentGrid, GridPoint, extract_edges, extract_vertices
from .propagation import RadioMap

STRATEGIES = ("random", "edge", "vertex", "hybrid", "budget_matched_random")


@dataclass(frozen=True)
class SamplingMask:
    points: tuple[GridPoint, ...]
    strategy: str
    seed: int | None = None

    def __post_init__(self):
        pts = tuple(GridPoint(int(r), int(c)) for r, c in self.points)
        if len(set(pts)) != len(pts):
            raise ValueError("duplicate points in sampling mask")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def rows(self) -> np.ndarray:
        return np.array([p.row for p in self.points], dtype=int)

    @property
    def cols(self) -> np.ndarray:
        return np.array([p.col for p in self.points], dtype=int)

    def to_array(self, n: int) -> np.ndarray:
        m = np.zeros((n, n), dtype=np.uint8)
        if self.points:
            m[self.rows, self.cols] = 1
        return m

    def ratio(self, env: EnvironmentGrid) -> float:
        """Fraction of free cells that are sampled."""
        return len(self) / float(env.free.sum())


def _sensing_cells(env: EnvironmentGrid) -> list[GridPoint]:
    rr, cc = np.nonzero(env.sensing_mask)
    return [GridPoint(int(r), int(c)) for r, c in zip(rr, cc)]


def _sorted_in_sensing(env: EnvironmentGrid, points) -> tuple[GridPoint, ...]:
    return tuple(sorted(p for p in points if env.sensing_mask[p.row, p.col]))


def random_mask(env: EnvironmentGrid, budget: int, seed: int, strategy: str = "random",
                exclude=()) -> SamplingMask:
    excluded = set(exclude)
    cells = [p for p in _sensing_cells(env) if p not in excluded]
    if budget < 0 or budget > len(cells):
        raise BudgetTooLarge(f"budget {budget} exceeds {len(cells)} available sensing cells")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(cells), size=budget, replace=False) if budget else []
    return SamplingMask(tuple(cells[i] for i in idx), strategy, seed)


def edge_mask(env: EnvironmentGrid) -> SamplingMask:
    return SamplingMask(_sorted_in_sensing(env, extract_edges(env)), "edge")


def vertex_mask(env: EnvironmentGrid) -> SamplingMask:
    return SamplingMask(_sorted_in_sensing(env, extract_vertices(env)), "vertex")


def hybrid_mask(env: EnvironmentGrid, random_fraction: float, seed: int) -> SamplingMask:
    """Vertex mask topped up with random cells making up ``random_fraction``."""
    if not 0 <= random_fraction <= 1:
        raise ValueError("random_fraction must lie in [0, 1]")
    base = vertex_mask(env)
    if random_fraction == 1:
        if base.points:
            raise BudgetTooLarge("random_fraction=1 leaves no room for vertex points")
        return SamplingMask((), "hybrid", seed)
    extra = int(round(len(base) * random_fraction / (1 - random_fraction)))
    added = random_mask(env, extra, seed, exclude=base.points)
    return SamplingMask(base.points + added.points, "hybrid", seed)


def budget_matched_random(env: EnvironmentGrid, reference: SamplingMask, seed: int) -> SamplingMask:
    return random_mask(env, len(reference), seed, strategy="budget_matched_random")


def make_mask(env: EnvironmentGrid, strategy: str, *, budget: int = 0, seed: int = 0,
              random_fraction: float = 0.2895, reference: str = "edge") -> SamplingMask:
    """Dispatch by strategy name; ``reference`` names the mask a budget-matched
    random draw copies its size from."""
    if strategy == "random":
        return random_mask(env, budget, seed)
    if strategy == "edge":
        return edge_mask(env)
    if strategy == "vertex":
        return vertex_mask(env)
    if strategy == "hybrid":
        return hybrid_mask(env, random_fraction, seed)
    if strategy == "budget_matched_random":
        ref = make_mask(env, reference, budget=budget, seed=seed, random_fraction=random_fraction)
        return budget_matched_random(env, ref, seed)
    raise ValueError(f"unknown strategy {strategy!r}")


REL_DB_QUANTUM = float(2 ** 24)  # steps per dB for the normalised level


@dataclass
class MeasurementSet:
    mask: SamplingMask
    raw: np.ndarray
    noise_std: float = 0.0
    normalized: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.raw = np.asarray(self.raw, dtype=float)
        if len(self.raw) != len(self.mask):
            raise ShapeMismatch("measurement count does not match the mask")
        if self.normalized is not None:
            self.normalized = np.asarray(self.normalized, dtype=float)

    def __len__(self) -> int:
        return len(self.raw)

    def shifted(self, offset_db: float) -> "MeasurementSet":
        return MeasurementSet(self.mask, self.raw + offset_db, self.noise_std)


def sample_rss(rm: RadioMap, mask: SamplingMask, noise_std: float = 0.0, seed: int = 0) -> MeasurementSet:
    if rm.normalized:
        raise ValueError("sample_rss expects a map in dB")
    n0, n1 = rm.values.shape
    for r, c in mask.points:
        if not (0 <= r < n0 and 0 <= c < n1):
            raise MaskOutsideMap(f"mask point {(r, c)} lies outside the {n0}x{n1} map")
    truth = rm.values[mask.rows, mask.cols] if len(mask) else np.zeros(0)
    noise = np.random.default_rng(seed).normal(0.0, noise_std, size=len(mask)) if noise_std > 0 else 0.0
    return MeasurementSet(mask, truth + noise, noise_std)


def normalize_rss(m: MeasurementSet) -> MeasurementSet:
    """Scale measurements by their maximum in linear power.

    ``y~_i = P_i / max_j P_j`` with ``P = 10^(y/10)``, so a common offset in dB
    cancels. Adding the offset can perturb the last bit of ``y - max(y)``, so
    the relative level is snapped to a 2^-24 dB grid to make the cancellation
    bit-exact.
    """
    if len(m) == 0:
        raise EmptyMeasurements("cannot normalise an empty measurement set")
    rel = np.round((m.raw - m.raw.max()) * REL_DB_QUANTUM) / REL_DB_QUANTUM
    return MeasurementSet(m.mask, m.raw, m.noise_std, normalized=np.power(10.0, rel / 10.0))


def build_condition_tensor(env: EnvironmentGrid, m: MeasurementSet) -> np.ndarray:
    """Three-channel input: building layout, then the sparse map twice."""
    n = env.n
    sparse = np.zeros((n, n))
    if len(m):
        if m.normalized is None:
            raise ValueError("measurements must be normalised first")
        rows, cols = m.mask.rows, m.mask.cols
        if rows.max() >= n or cols.max() >= n or rows.min() < 0 or cols.min() < 0:
            raise ShapeMismatch("mask points fall outside the environment")
        sparse[rows, cols] = m.normalized
    return np.stack([env.occupancy.astype(float), sparse, sparse.copy()])


# --------------------------------------------------------------------------
# Serialisation


def save_mask_txt(mask: SamplingMask, path) -> None:
    Path(path).write_text("".join(f"{r},{c}\n" for r, c in mask.points))


def load_mask_txt(path, strategy: str = "random", seed: int | None = None) -> SamplingMask:
    pts = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line:
            r, c = line.split(",")
            pts.append((int(r), int(c)))
    return SamplingMask(tuple(pts), strategy, seed)


def save_mask_pgm(mask: SamplingMask, n: int, path) -> None:
    """Binary PGM (P5), 255 at sampled cells."""
    img = mask.to_array(n) * 255
    with open(path, "wb") as fh:
        fh.write(f"P5\n{n} {n}\n255\n".encode("ascii"))
        fh.write(img.astype(np.uint8).tobytes())


def load_mask_pgm(path, strategy: str = "random") -> SamplingMask:
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos].decode("ascii"))
    if tokens[0] != "P5":
        raise ValueError("not a binary PGM file")
    w, h = int(tokens[1]), int(tokens[2])
    img = np.frombuffer(data[pos + 1:pos + 1 + w * h], dtype=np.uint8).reshape(h, w)
    rr, cc = np.nonzero(img >= 128)
    return SamplingMask(tuple(zip(rr.tolist(), cc.tolist())), strategy)

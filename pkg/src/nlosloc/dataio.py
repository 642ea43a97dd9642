"""Scene I/O (RadioMapSeer-style PNGs), synthetic scenes and splits."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import BadDimensions, InvalidEnvironment, PlacementFailure, UnreadableImage
from .geometry import EnvironmentGrid, GridPoint, extract_edges
from .propagation import DYNAMIC_RANGE_DB, PropagationParams, RadioMap, synthesize_radio_map

DATASET_SIZE = 256


@dataclass
class SceneRecord:
    scene_id: str
    env: EnvironmentGrid
    tx: GridPoint
    ground_truth: RadioMap | None = None  # in dB
    source: str = "synthetic"
    buildings: tuple = ()  # (row, col, height, width) rectangles when generated

    def __post_init__(self):
        if not self.env.is_free(self.tx):
            raise InvalidEnvironment(f"scene {self.scene_id}: tx {tuple(self.tx)} is not free")
        if self.env.restricted_mask.any() and not self.env.restricted_mask[self.tx]:
            raise InvalidEnvironment(f"scene {self.scene_id}: tx outside the restricted region")

    def normalized_truth(self, dynamic_range_db: float = DYNAMIC_RANGE_DB) -> RadioMap:
        if self.ground_truth is None:
            raise ValueError(f"scene {self.scene_id} has no ground-truth map")
        return self.ground_truth.normalize(self.env.free, dynamic_range_db)


def _read_gray(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as exc:
        raise UnreadableImage(f"cannot read {path}: {exc}") from exc


def _write_gray(arr: np.ndarray, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    Image.fromarray(np.asarray(arr, dtype=np.uint8), mode="L").save(tmp, format="PNG")
    tmp.replace(path)


def load_building_map(path, any_size: bool = False, split: str = "lower", **env_kwargs) -> EnvironmentGrid:
    img = _read_gray(path)
    if not any_size and img.shape != (DATASET_SIZE, DATASET_SIZE):
        raise BadDimensions(f"{path}: expected {DATASET_SIZE}x{DATASET_SIZE}, got {img.shape}")
    occ = (img >= 128).astype(np.uint8)
    if occ.all():
        raise InvalidEnvironment(f"{path}: no free cell for a transmitter")
    return EnvironmentGrid.from_occupancy(occ, split=split, **env_kwargs)


def save_building_map(env: EnvironmentGrid, path) -> None:
    _write_gray(env.occupancy * 255, path)


def load_gain_map(path, tx=(0, 0), any_size: bool = True) -> RadioMap:
    img = _read_gray(path)
    if not any_size and img.shape != (DATASET_SIZE, DATASET_SIZE):
        raise BadDimensions(f"{path}: expected {DATASET_SIZE}x{DATASET_SIZE}, got {img.shape}")
    return RadioMap(img.astype(float) / 255.0, GridPoint(*tx), normalized=True)


def save_gain_map(rm: RadioMap, path) -> None:
    if not rm.normalized:
        raise ValueError("only normalised maps are stored as images")
    _write_gray(np.rint(np.clip(rm.values, 0, 1) * 255), path)


def generate_synthetic_scene(n: int = 64, building_count=(3, 10), seed: int = 0,
                             params: PropagationParams | None = None, split: str = "lower",
                             scene_id: str | None = None, with_truth: bool = True,
                             require_sensing_edges: bool = True) -> SceneRecord:
    """Random axis-aligned rectangular buildings and a transmitter in the
    restricted region.

    With ``require_sensing_edges`` a layout is redrawn until some building
    edge falls inside the sensing region; attempts count towards the same
    1000-draw limit as rectangle placement.
    """
    if n < 16:
        raise ValueError("grid size must be at least 16")
    rng = np.random.default_rng(seed)
    lo, hi = (building_count, building_count) if np.isscalar(building_count) else building_count
    max_side = max(2, n // 8)
    attempts = 0
    while True:
        count = int(rng.integers(lo, hi + 1))
        occ = np.zeros((n, n), dtype=np.uint8)
        rects = []
        placed = 0
        while placed < count:
            attempts += 1
            if attempts > 1000:
                raise PlacementFailure(f"placed {placed}/{count} buildings after 1000 attempts")
            h, w = rng.integers(2, max_side + 1, size=2)
            r, c = rng.integers(0, n - h + 1), rng.integers(0, n - w + 1)
            if occ[r:r + h, c:c + w].any():
                continue
            occ[r:r + h, c:c + w] = 1
            rects.append((int(r), int(c), int(h), int(w)))
            placed += 1
        env = EnvironmentGrid.from_occupancy(occ, split=split)
        if not (require_sensing_edges and count > 0):
            break
        if any(env.sensing_mask[p] for p in extract_edges(env)):
            break
        attempts += 1
    pool = env.restricted_mask if env.restricted_mask.any() else env.free
    rr, cc = np.nonzero(pool)
    k = int(rng.integers(len(rr)))
    tx = GridPoint(int(rr[k]), int(cc[k]))
    truth = synthesize_radio_map(env, tx, params) if with_truth else None
    return SceneRecord(scene_id or f"s{seed:05d}", env, tx, truth, "synthetic", tuple(rects))


def split_manifest(records, train_count: int, test_count: int, seed: int):
    records = list(records)
    if train_count < 0 or test_count < 0 or train_count + test_count > len(records):
        raise ValueError("train + test exceeds the number of records")
    order = np.random.default_rng(seed).permutation(len(records))
    train = [records[i] for i in order[:train_count]]
    test = [records[i] for i in order[train_count:train_count + test_count]]
    return train, test


# --------------------------------------------------------------------------
# Scene directory layout: scenes/<id>/building.png, scenes/<id>/gain_tx<k>.png,
# manifest.csv with scene_id, tx_row, tx_col, split


def write_scenes(root, records, splits: dict[str, str] | None = None) -> Path:
    root = Path(root)
    rows = []
    for rec in records:
        d = root / "scenes" / rec.scene_id
        save_building_map(rec.env, d / "building.png")
        if rec.ground_truth is not None:
            save_gain_map(rec.normalized_truth(), d / "gain_tx0.png")
            np.save(d / "gain_tx0_db.npy", rec.ground_truth.values)
        rows.append((rec.scene_id, rec.tx.row, rec.tx.col, (splits or {}).get(rec.scene_id, "test")))
    manifest = root / "manifest.csv"
    tmp = manifest.with_name("manifest.csv.tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scene_id", "tx_row", "tx_col", "split"])
        w.writerows(rows)
    tmp.replace(manifest)
    return manifest


def read_manifest(root) -> list[dict]:
    path = Path(root) / "manifest.csv"
    if not path.exists():
        raise FileNotFoundError(path)
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def load_scene(root, row: dict, params: PropagationParams | None = None, split: str = "lower") -> SceneRecord:
    """Rebuild a scene from disk; a stored dB map is preferred over the PNG."""
    d = Path(root) / "scenes" / row["scene_id"]
    env = load_building_map(d / "building.png", any_size=True, split=split)
    tx = GridPoint(int(row["tx_row"]), int(row["tx_col"]))
    truth = None
    if (d / "gain_tx0_db.npy").exists():
        truth = RadioMap(np.load(d / "gain_tx0_db.npy"), tx, params or PropagationParams())
    return SceneRecord(row["scene_id"], env, tx, truth, "dataset" if truth is None else "synthetic")

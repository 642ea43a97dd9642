"""Map reconstruction and localization metrics, plus an evaluation report."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import MapTooSmallForWindow, ShapeMismatch, ZeroEnergyTruth

SSIM_WINDOW = 8
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SUMMARY_COLUMNS = ("NMSE", "RMSE", "SSIM", "PSNR", "LE", "Sampling Ratio")


def _pair(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(getattr(pred, "values", pred), dtype=float)
    t = np.asarray(getattr(truth, "values", truth), dtype=float)
    if p.shape != t.shape:
        raise ShapeMismatch(f"shape mismatch {p.shape} vs {t.shape}")
    return p, t


def mse(pred, truth) -> float:
    p, t = _pair(pred, truth)
    return float(np.mean((p - t) ** 2))


def rmse(pred, truth) -> float:
    return float(np.sqrt(mse(pred, truth)))


def nmse(pred, truth) -> float:
    p, t = _pair(pred, truth)
    energy = float((t ** 2).sum())
    if energy == 0.0:
        raise ZeroEnergyTruth("truth map has zero energy")
    return float(((p - t) ** 2).sum()) / energy


def ssim(pred, truth, dynamic_range: float = 1.0, window: int = SSIM_WINDOW) -> float:
    """Mean SSIM over non-overlapping ``window`` x ``window`` blocks.

    Rows and columns that do not fill a whole block are ignored.
    """
    p, t = _pair(pred, truth)
    h, w = p.shape[0] // window, p.shape[1] // window
    if h == 0 or w == 0:
        raise MapTooSmallForWindow(f"map {p.shape} is smaller than the {window}x{window} window")

    def blocks(a):
        return a[:h * window, :w * window].reshape(h, window, w, window).transpose(0, 2, 1, 3).reshape(h, w, -1)

    bp, bt = blocks(p), blocks(t)
    mp, mt = bp.mean(-1), bt.mean(-1)
    vp, vt = bp.var(-1), bt.var(-1)
    cov = ((bp - mp[..., None]) * (bt - mt[..., None])).mean(-1)
    c1 = (SSIM_K1 * dynamic_range) ** 2
    c2 = (SSIM_K2 * dynamic_range) ** 2
    s = ((2 * mp * mt + c1) * (2 * cov + c2)) / ((mp ** 2 + mt ** 2 + c1) * (vp + vt + c2))
    return float(s.mean())


def psnr(pred, truth, dynamic_range: float = 1.0) -> float:
    e = mse(pred, truth)
    if e == 0.0:
        return float("inf")
    return float(10.0 * np.log10(dynamic_range ** 2 / e))


def localization_error(est, truth, cell_size: float = 1.0) -> float:
    pos = getattr(est, "position", est)
    return float(np.hypot(float(pos[0]) - float(truth[0]), float(pos[1]) - float(truth[1])) * cell_size)


@dataclass(frozen=True)
class MetricRecord:
    scene_id: str
    group: str
    metric: str
    value: float


@dataclass
class EvalReport:
    """Per-scene metric records grouped by configuration (e.g. sampling strategy)."""

    records: list[MetricRecord] = field(default_factory=list)
    notes: tuple[str, ...] = (
        f"SSIM on normalised maps, {SSIM_WINDOW}x{SSIM_WINDOW} non-overlapping blocks, "
        f"K1={SSIM_K1}, K2={SSIM_K2}, L=1",
        "PSNR dynamic range 1 on normalised maps",
    )

    def add(self, scene_id: str, group: str, metric: str, value: float) -> None:
        self.records.append(MetricRecord(str(scene_id), str(group), str(metric), float(value)))

    def values(self, group: str, metric: str) -> np.ndarray:
        return np.array([r.value for r in self.records if r.group == group and r.metric == metric])

    def groups(self) -> list[str]:
        return list(dict.fromkeys(r.group for r in self.records))

    def aggregate(self, group: str, metric: str) -> tuple[float, float]:
        v = self.values(group, metric)
        if v.size == 0:
            return float("nan"), float("nan")
        mean = float(np.sum(v) / v.size)
        return mean, float(v.std())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(["scene_id", "group", "metric", "value"])
        for r in self.records:
            w.writerow([r.scene_id, r.group, r.metric, repr(r.value)])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(self.to_csv(), newline="")
        tmp.replace(path)

    def summary_table(self) -> str:
        """Plain-text table: one row per group, mean of each summary column."""
        head = ["Method", *SUMMARY_COLUMNS]
        rows = []
        for g in self.groups():
            cells = [g]
            for col in SUMMARY_COLUMNS:
                mean, _ = self.aggregate(g, col)
                if col == "Sampling Ratio":
                    cells.append(f"{100 * mean:.2f}%")
                else:
                    cells.append(f"{mean:.4f}")
            rows.append(cells)
        widths = [max(len(str(x)) for x in colvals) for colvals in zip(head, *rows)]
        lines = ["# " + note for note in self.notes]
        lines.append("  ".join(h.ljust(wd) for h, wd in zip(head, widths)))
        lines.append("  ".join("-" * wd for wd in widths))
        lines += ["  ".join(c.ljust(wd) for c, wd in zip(r, widths)) for r in rows]
        return "\n".join(lines) + "\n"

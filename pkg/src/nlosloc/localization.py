"""Emitter position estimators.

Map-based estimators read a reconstructed radio map; classical estimators
work directly on RSS measurements under a log-distance model

    y_i = P0 - 10 n log10(d_i / d0).

Positions are (row, col) in cell units and may be fractional.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import (DegenerateGeometry, EmptyCandidates, EmptyEnsemble, EmptyRegion, KTooLarge,
                     SingularSystem, TooFewMeasurements)
from .propagation import RadioMap
from .sampling import MeasurementSet


@dataclass
class Estimate:
    position: tuple[float, float]
    method: str
    le: float | None = None
    dispersion: float | None = None
    converged: bool = True
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.position = (float(self.position[0]), float(self.position[1]))

    @property
    def row(self) -> float:
        return self.position[0]

    @property
    def col(self) -> float:
        return self.position[1]


@dataclass(frozen=True)
class PathlossModel:
    p0: float
    exponent: float = 2.0
    reference_distance: float = 1.0

    def __post_init__(self):
        if not self.exponent > 0:
            raise ValueError("path-loss exponent must be positive")
        if not self.reference_distance > 0:
            raise ValueError("reference distance must be positive")

    def rss(self, distance_m) -> np.ndarray:
        d = np.maximum(np.asarray(distance_m, dtype=float), 1e-9)
        return self.p0 - 10.0 * self.exponent * np.log10(d / self.reference_distance)

    def distance(self, rss) -> np.ndarray:
        """Invert the model: metres from an RSS value."""
        return self.reference_distance * np.power(10.0, (self.p0 - np.asarray(rss, float)) / (10.0 * self.exponent))


def _values(rm) -> np.ndarray:
    return np.asarray(rm.values if isinstance(rm, RadioMap) else rm, dtype=float)


# --------------------------------------------------------------------------
# Map-based estimators


def argmax_localize(rm, region=None) -> Estimate:
    """Cell of maximum value within ``region`` (the whole map if None).

    ``np.argmax`` on the row-major flattening returns the first maximum, which
    is the lexicographically smallest (row, col).
    """
    v = _values(rm)
    if region is None:
        region = np.ones(v.shape, dtype=bool)
    region = np.asarray(region).astype(bool)
    if not region.any():
        raise EmptyRegion("argmax over an empty region")
    masked = np.where(region, v, -np.inf)
    r, c = np.unravel_index(int(np.argmax(masked)), v.shape)
    return Estimate((r, c), "argmax")


def _ranked(v: np.ndarray) -> np.ndarray:
    # value-descending, row-major among equal values
    return np.argsort(-v.ravel(), kind="stable")


def topk_weighted_centroid(rm, k: int) -> Estimate:
    v = _values(rm)
    if k < 1:
        raise ValueError("k must be at least 1")
    if k > v.size:
        raise KTooLarge(f"k={k} exceeds the {v.size} map cells")
    idx = _ranked(v)[:k]
    rows, cols = np.unravel_index(idx, v.shape)
    w = v.ravel()[idx]
    total = w.sum()
    if total <= 0:
        # all-zero weights: the plain centroid is the only sensible answer
        return Estimate((rows.mean(), cols.mean()), "topk_wc", info={"k": k})
    # offsets from the brightest cell keep k = 1 exact and limit cancellation
    r0, c0 = rows[0], cols[0]
    return Estimate((r0 + (w * (rows - r0)).sum() / total, c0 + (w * (cols - c0)).sum() / total),
                    "topk_wc", info={"k": k})


def threshold_region_center(rm, percentile: float) -> Estimate:
    v = _values(rm)
    if not 0 < percentile < 100:
        raise ValueError("percentile must lie in (0, 100)")
    thr = np.percentile(v, percentile)
    rows, cols = np.nonzero(v >= thr)
    if rows.size == 0:
        raise EmptyRegion("no cell reaches the threshold")
    return Estimate((rows.mean(), cols.mean()), "trc", info={"threshold": float(thr)})


_EIGHT = np.ones((3, 3), dtype=int)


def largest_blob_centroid(rm, alpha: float) -> Estimate:
    """Centroid of the largest 8-connected component above ``alpha * max``.

    Equal-size components are separated by their brightest cell, then by the
    row-major position of that cell.
    """
    v = _values(rm)
    if not 0 < alpha <= 1:
        raise ValueError("alpha must lie in (0, 1]")
    binary = v >= alpha * v.max()
    labels, count = ndimage.label(binary, structure=_EIGHT)
    sizes = np.bincount(labels.ravel(), minlength=count + 1)[1:]
    tied = np.flatnonzero(sizes == sizes.max()) + 1
    if len(tied) > 1:
        best, best_key = None, None
        for lab in tied:
            inside = np.where(labels == lab, v, -np.inf).ravel()
            pos = int(np.argmax(inside))
            key = (-inside[pos], pos)
            if best_key is None or key < best_key:
                best, best_key = lab, key
        label = best
    else:
        label = int(tied[0])
    rows, cols = np.nonzero(labels == label)
    return Estimate((rows.mean(), cols.mean()), "lbc", info={"size": int(rows.size)})


def ensemble_localize(estimates) -> Estimate:
    """Component-wise median, with mean pairwise distance as dispersion."""
    estimates = list(estimates)
    if not estimates:
        raise EmptyEnsemble("no estimates to aggregate")
    pts = np.array([e.position for e in estimates], dtype=float)
    med = np.median(pts, axis=0)
    if len(pts) > 1:
        diff = pts[:, None, :] - pts[None, :, :]
        dist = np.sqrt((diff ** 2).sum(-1))
        iu = np.triu_indices(len(pts), 1)
        spread = float(dist[iu].mean())
    else:
        spread = 0.0
    method = estimates[0].method if len({e.method for e in estimates}) == 1 else "mixed"
    return Estimate(tuple(med), f"ensemble_{method}", dispersion=spread)


# --------------------------------------------------------------------------
# Classical RSS estimators


def _anchors(m: MeasurementSet) -> np.ndarray:
    return np.column_stack([m.mask.rows, m.mask.cols]).astype(float)


def _require(m: MeasurementSet, minimum: int = 4) -> None:
    if len(m) < minimum:
        raise TooFewMeasurements(f"need at least {minimum} measurements, got {len(m)}")


def _collinear(anchors: np.ndarray) -> bool:
    centred = anchors - anchors.mean(0)
    return np.linalg.matrix_rank(centred, tol=1e-9 * max(1.0, np.abs(centred).max())) < 2


def _lateration(m: MeasurementSet, model: PathlossModel, cell_size: float, weighted: bool):
    _require(m)
    a = _anchors(m)
    d = model.distance(m.raw) / cell_size
    # subtract the last anchor's range equation from the others
    ar, dr = a[-1], d[-1]
    A = 2.0 * (ar - a[:-1])
    b = d[:-1] ** 2 - dr ** 2 - (a[:-1] ** 2).sum(1) + (ar ** 2).sum()
    w = 1.0 / d[:-1] ** 2 if weighted else np.ones(len(b))
    N = A.T @ (w[:, None] * A)
    if np.linalg.matrix_rank(N) < 2 or np.linalg.cond(N) > 1e12:
        raise SingularSystem("lateration system is singular (anchors collinear?)")
    return np.linalg.solve(N, A.T @ (w * b))


def ls_localize(m: MeasurementSet, model: PathlossModel, cell_size: float = 1.0) -> Estimate:
    return Estimate(tuple(_lateration(m, model, cell_size, False)), "ls")


def awls_localize(m: MeasurementSet, model: PathlossModel, cell_size: float = 1.0) -> Estimate:
    """Lateration with weights 1/d_i^2 on the differenced equations."""
    return Estimate(tuple(_lateration(m, model, cell_size, True)), "awls")


def mbe_localize(m: MeasurementSet, model: PathlossModel, candidates, noise_std: float = 1.0,
                 cell_size: float = 1.0, p0_grid=None) -> Estimate:
    """Grid maximum likelihood under a uniform prior over ``candidates``.

    With ``p0_grid`` the likelihood is also maximised over P0; ties go to the
    first candidate (and the first P0) in the order given.
    """
    cand = np.atleast_2d(np.asarray(candidates, dtype=float))
    if cand.size == 0:
        raise EmptyCandidates("candidate grid is empty")
    if len(m) == 0:
        raise TooFewMeasurements("no measurements")
    a = _anchors(m)
    dist = np.sqrt(((cand[:, None, :] - a[None, :, :]) ** 2).sum(-1)) * cell_size
    p0s = np.atleast_1d(np.asarray(p0_grid if p0_grid is not None else [model.p0], dtype=float))
    shape = model.rss(dist) - model.p0  # model without P0, (M, K)
    resid = m.raw[None, None, :] - (p0s[None, :, None] + shape[:, None, :])
    sigma2 = float(noise_std) ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        loglik = -(resid ** 2).sum(-1) / (2.0 * sigma2)
    loglik = np.nan_to_num(loglik, nan=0.0)
    flat = int(np.argmax(loglik))
    i, j = np.unravel_index(flat, loglik.shape)
    return Estimate(tuple(cand[i]), "mbe", info={"p0": float(p0s[j]), "loglik": float(loglik[i, j])})


def _lm(a, y, n, d0, cell_size, start, damping=1e-3, tol=1e-6, max_iter=200):
    """Levenberg-Marquardt over (row, col, P0); returns (theta, cost, converged)."""
    theta = np.asarray(start, dtype=float).copy()

    def residual(th):
        dist = np.maximum(np.sqrt(((a - th[:2]) ** 2).sum(1)), 1e-9)
        pred = th[2] - 10.0 * n * np.log10(dist * cell_size / d0)
        return y - pred, dist

    r, dist = residual(theta)
    cost = float(r @ r)
    lam = damping
    for _ in range(max_iter):
        # d pred / d pos = -10 n / ln10 * (pos - a) / dist^2 ; residual derivative is its negative
        g = (10.0 * n / np.log(10.0)) * (theta[:2] - a) / dist[:, None] ** 2
        J = np.column_stack([g, -np.ones(len(y))])
        JtJ = J.T @ J
        step = np.linalg.solve(JtJ + lam * np.diag(np.maximum(np.diag(JtJ), 1e-12)), -J.T @ r)
        cand = theta + step
        r_new, dist_new = residual(cand)
        cost_new = float(r_new @ r_new)
        if cost_new < cost:
            theta, r, dist, cost = cand, r_new, dist_new, cost_new
            lam = max(lam / 10.0, 1e-12)
            if np.linalg.norm(step) < tol:
                return theta, cost, True
        else:
            lam *= 10.0
            if lam > 1e12 or np.linalg.norm(step) < tol:
                return theta, cost, True
    return theta, cost, False


def nls_localize(m: MeasurementSet, model0: PathlossModel, grid_shape=None, sensing_mask=None,
                 cell_size: float = 1.0) -> Estimate:
    """Joint (row, col, P0) fit with the exponent held at ``model0.exponent``.

    Five starts: the sensing-region centroid (anchor centroid when no mask is
    given) and the centres of the four grid quadrants. The best residual wins;
    ``converged`` is False when that run hit the iteration cap.
    """
    a = _anchors(m)
    # collinearity is the more specific diagnosis, so it is checked first
    if len(a) >= 2 and _collinear(a):
        raise DegenerateGeometry("anchors are collinear")
    _require(m)
    if grid_shape is None:
        lo, hi = a.min(0), a.max(0)
    else:
        lo, hi = np.zeros(2), np.asarray(grid_shape, float) - 1.0
    if sensing_mask is not None and np.asarray(sensing_mask).any():
        centre = np.argwhere(np.asarray(sensing_mask).astype(bool)).mean(0)
    else:
        centre = a.mean(0)
    span = hi - lo
    starts = [centre] + [lo + span * np.array(f) for f in ((0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75))]
    best = None
    for s in starts:
        theta, cost, ok = _lm(a, m.raw, model0.exponent, model0.reference_distance, cell_size,
                              (s[0], s[1], model0.p0))
        if best is None or cost < best[1]:
            best = (theta, cost, ok)
    theta, cost, ok = best
    pos = theta[:2]
    if grid_shape is not None:
        pos = np.clip(pos, lo, hi)
    return Estimate(tuple(pos), "nls", converged=ok, info={"p0": float(theta[2]), "cost": cost})

"""Decoupled diffusion: closed-form forward transition and reverse update.

The drift is constant, ``f_t = -x0`` on ``t in [0, 1]``, so the signal decays
linearly to zero while noise variance grows linearly:

    x_t = (1 - t) x0 + sqrt(t) eps

and one reverse step of size ``dt`` is

    x_{t-dt} = x_t + dt x0_hat - dt / sqrt(t) eps_hat + sqrt(dt (t - dt) / t) z.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.ndimage import gaussian_filter

from .errors import BadTimestep, SingularSystem
from .geometry import line_of_sight
from .propagation import DYNAMIC_RANGE_DB, RadioMap

EPS_MIN = 1e-3


@dataclass(frozen=True)
class DiffusionSchedule:
    num_steps: int = 50
    eps_min: float = EPS_MIN

    def __post_init__(self):
        if self.num_steps < 1:
            raise BadTimestep("schedule needs at least one step")
        if not 0 < self.eps_min < 1:
            raise BadTimestep("eps_min must lie in (0, 1)")

    @property
    def t_grid(self) -> np.ndarray:
        if self.num_steps == 1:
            return np.array([1.0, self.eps_min])
        return np.linspace(1.0, self.eps_min, self.num_steps + 1)

    def steps(self):
        """Yield ``(t, dt, final)``; the final step lands on t = 0 exactly."""
        g = self.t_grid
        for k in range(self.num_steps):
            final = k == self.num_steps - 1
            t = float(g[k])
            yield t, (t if final else t - float(g[k + 1])), final


@dataclass
class DiffusionState:
    x: np.ndarray
    t: float


@dataclass
class DenoiserOutput:
    x0_hat: np.ndarray
    eps_hat: np.ndarray


def _check_t(t: float) -> float:
    t = float(t)
    if not 0 < t <= 1:
        raise BadTimestep(f"timestep must lie in (0, 1], got {t}")
    return t


def forward_sample(x0: np.ndarray, t: float, seed=None) -> DiffusionState:
    t = _check_t(t)
    x0 = np.asarray(x0, dtype=float)
    eps = np.random.default_rng(seed).standard_normal(x0.shape)
    return DiffusionState((1 - t) * x0 + math.sqrt(t) * eps, t)


def oracle_denoiser(state: DiffusionState, x0: np.ndarray) -> DenoiserOutput:
    """Exact predictions given the clean field."""
    t = _check_t(state.t)
    x0 = np.asarray(x0, dtype=float)
    return DenoiserOutput(x0.copy(), (state.x - (1 - t) * x0) / math.sqrt(t))


class OracleDenoiser:
    def __init__(self, x0: np.ndarray):
        self.x0 = np.asarray(x0, dtype=float)

    def __call__(self, state: DiffusionState, cond=None) -> DenoiserOutput:
        return oracle_denoiser(state, self.x0)


def reverse_step(state: DiffusionState, out: DenoiserOutput, dt: float, seed=None) -> DiffusionState:
    t = _check_t(state.t)
    if dt < 0 or dt > t:
        raise BadTimestep(f"step {dt} must lie in [0, t={t}]")
    mean = state.x + dt * out.x0_hat - dt / math.sqrt(t) * out.eps_hat
    var = dt * (t - dt) / t
    if var > 0:
        mean = mean + math.sqrt(var) * np.random.default_rng(seed).standard_normal(state.x.shape)
    return DiffusionState(mean, t - dt)


def _bound(denoiser, cond) -> Callable[[DiffusionState], DenoiserOutput]:
    if hasattr(denoiser, "bind"):
        return denoiser.bind(cond)
    return lambda s: denoiser(s, cond)


def reverse_chain(x_T: np.ndarray, denoiser, schedule: DiffusionSchedule, seed=None, cond=None,
                  project: Callable | None = None) -> np.ndarray:
    """Run the reverse process from t = 1 to 0 and clip the result to [0, 1].

    ``project(x, t, out, rng)`` may overwrite cells of the new state after
    every step (data consistency).
    """
    rng = np.random.default_rng(seed)
    predict = _bound(denoiser, cond)
    state = DiffusionState(np.asarray(x_T, dtype=float), 1.0)
    for t, dt, final in schedule.steps():
        out = predict(state)
        state = reverse_step(state, out, dt, rng)
        if final:
            state.t = 0.0
        if project is not None:
            state.x = project(state.x, state.t, out, rng)
    return np.clip(state.x, 0.0, 1.0)


def measured_gain(y_norm: np.ndarray, dynamic_range_db: float = DYNAMIC_RANGE_DB) -> np.ndarray:
    """Normalised linear RSS -> gain-map units, relative to the strongest sample."""
    return 1.0 + 10.0 * np.log10(y_norm) / dynamic_range_db


def reconstruct_rm(cond: np.ndarray, denoiser, schedule: DiffusionSchedule | None = None,
                   ensemble: int = 1, seed: int = 0, data_consistency: bool = True,
                   dynamic_range_db: float = DYNAMIC_RANGE_DB) -> list[RadioMap]:
    """Sample ``ensemble`` radio maps conditioned on a three-channel tensor.

    With data consistency on, measured cells are pinned after every step. The
    measurements only fix gains up to a common offset (transmit power is
    unknown), so the offset is re-estimated from the current clean-field
    prediction before pinning.
    """
    if ensemble < 1:
        raise ValueError("ensemble size must be at least 1")
    schedule = schedule or DiffusionSchedule()
    mask = cond[1] > 0
    q = measured_gain(cond[1][mask], dynamic_range_db) if mask.any() else None

    def project(x, t, out, rng):
        offset = float(np.mean(q - out.x0_hat[mask]))
        target = np.clip(q - offset, 0.0, 1.0)
        x = x.copy()
        x[mask] = (1 - t) * target + math.sqrt(t) * rng.standard_normal(target.shape)
        return x

    maps = []
    for k in range(ensemble):
        rng = np.random.default_rng([seed, k])
        x_T = rng.standard_normal(cond.shape[1:])
        x0 = reverse_chain(x_T, denoiser, schedule, rng, cond,
                           project if (data_consistency and q is not None) else None)
        maps.append(RadioMap(x0, None, normalized=True))
    return maps


def interpolate_measurements(cond: np.ndarray, sigma: float = 4.0,
                             dynamic_range_db: float = DYNAMIC_RANGE_DB) -> RadioMap:
    """Baseline without a denoiser: Gaussian normalised convolution of the samples."""
    mask = cond[1] > 0
    field_ = np.zeros(cond.shape[1:])
    if mask.any():
        field_[mask] = measured_gain(cond[1][mask], dynamic_range_db)
    num = gaussian_filter(field_, sigma, mode="constant")
    den = gaussian_filter(mask.astype(float), sigma, mode="constant")
    out = np.where(den > 1e-12, num / np.maximum(den, 1e-12), 0.0)
    out[cond[0] > 0.5] = 0.0
    return RadioMap(np.clip(out, 0.0, 1.0), None, normalized=True)


# --------------------------------------------------------------------------
# Desk-scale learned denoiser: per-pixel ridge regression


CONTEXT_SCALES = (2.0, 4.0, 8.0)
N_CONTEXT = 7 + len(CONTEXT_SCALES)


def measurement_context(cond: np.ndarray, pathloss_exponent: float = 2.0, tau_db: float = 2.0,
                        dynamic_range_db: float = DYNAMIC_RANGE_DB, top: int = 64) -> np.ndarray:
    """Global feature maps derived from the sparse measurements.

    A purely local patch cannot see samples tens of cells away, so each pixel
    also gets (a) a source-plausibility weight from a line-of-sight-aware
    log-distance fit, (b) the posterior-mean log-distance gain map implied by
    those weights, (c) the posterior probability of a clear path to the
    source and (d) the same gain map restricted to clear paths, (e) the
    plain and clear-path gain maps of the single most likely source, (f) the
    fitted power offset, and (g) multi-scale normalised convolutions of the
    offset-corrected samples. Returns (N_CONTEXT, N, N).
    """
    occ = cond[0] > 0.5
    mask = cond[1] > 0
    n = occ.shape[0]
    out = np.zeros((N_CONTEXT, n, n))
    if not mask.any():
        return out
    pts = np.argwhere(mask)
    q = measured_gain(cond[1][mask], dynamic_range_db)
    cands = np.argwhere(~occ)
    los = line_of_sight(occ, cands, pts)
    slope = 10.0 * pathloss_exponent / dynamic_range_db
    dist = np.maximum(np.linalg.norm(cands[:, None, :] - pts[None, :, :], axis=-1), 1.0)
    res = q[None, :] + slope * np.log10(dist)
    nlos = los.sum(1)
    offset = (res * los).sum(1) / np.maximum(nlos, 1)
    dev = res - offset[:, None]
    # blocked samples may sit below the clear-path prediction, never above it
    score = ((dev ** 2) * los + (np.maximum(dev, 0.0) ** 2) * ~los).sum(1) / len(q)
    score[nlos == 0] = np.inf
    if not np.isfinite(score).any():
        return out
    tau = tau_db / dynamic_range_db
    w = np.exp(-(score - score.min()) / tau ** 2)
    weight = np.zeros((n, n))
    weight[cands[:, 0], cands[:, 1]] = w
    keep = np.argsort(-w, kind="stable")[:top]
    keep = keep[w[keep] > 0]
    wk = w[keep] / w[keep].sum()
    grid = np.indices((n, n)).reshape(2, -1).T
    d_all = np.maximum(np.linalg.norm(grid[:, None, :] - cands[keep][None, :, :], axis=-1), 1.0)
    gain = 1.0 - slope * np.log10(d_all)
    clear = line_of_sight(occ, grid, cands[keep])
    c_hat = float((wk * (offset[keep] - 1.0)).sum())
    field_ = np.zeros((n, n))
    field_[mask] = q - c_hat
    out[0] = weight
    out[1] = (gain * wk).sum(1).reshape(n, n)
    out[2] = (clear * wk).sum(1).reshape(n, n)
    out[3] = (gain * clear * wk).sum(1).reshape(n, n)
    best = int(np.argmax(wk))
    out[4] = gain[:, best].reshape(n, n)
    out[5] = (gain[:, best] * clear[:, best]).reshape(n, n)
    out[1:6, occ] = 0.0
    out[6] = c_hat
    for i, s in enumerate(CONTEXT_SCALES):
        num = gaussian_filter(field_, s, mode="constant")
        den = gaussian_filter(mask.astype(float), s, mode="constant")
        out[7 + i] = np.where(den > 1e-12, num / np.maximum(den, 1e-12), 0.0)
    return out


def _patches(img: np.ndarray, radius: int) -> np.ndarray:
    if radius == 0:
        return img.reshape(-1, 1)
    p = np.pad(img, radius, mode="edge")
    w = sliding_window_view(p, (2 * radius + 1, 2 * radius + 1))
    return w.reshape(img.shape[0] * img.shape[1], -1)


def feature_dim(patch_radius: int) -> int:
    p = (2 * patch_radius + 1) ** 2
    return 4 * p + N_CONTEXT + 3


@dataclass
class _Static:
    cols: np.ndarray  # (N*N, 3P + N_CONTEXT)


def _static_features(cond: np.ndarray, radius: int, context: np.ndarray) -> _Static:
    parts = [_patches(cond[c], radius) for c in range(3)]
    parts.append(context.reshape(N_CONTEXT, -1).T)
    return _Static(np.hstack(parts))


def _features(x: np.ndarray, t: float, radius: int, static: _Static, rows=None) -> np.ndarray:
    xp = _patches(x, radius)
    centre = x.reshape(-1, 1)
    sel = slice(None) if rows is None else rows
    m = len(centre) if rows is None else len(rows)
    return np.hstack([
        xp[sel],
        static.cols[sel],
        np.full((m, 1), t),
        centre[sel] / math.sqrt(t),
        np.ones((m, 1)),
    ])


@dataclass
class RidgeDenoiserModel:
    """Per-timestep-bucket linear map from pixel features to (x0, eps)."""

    weights: np.ndarray  # (buckets, feature_dim, 2)
    patch_radius: int = 2
    ridge_lambda: float = 1e-3
    bucket_edges: np.ndarray = field(default_factory=lambda: np.linspace(0.0, 1.0, 11))

    MAGIC = b"RDLD"
    VERSION = 1

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if not np.isfinite(self.weights).all():
            raise SingularSystem("non-finite ridge weights")
        if len(self.bucket_edges) != len(self.weights) + 1:
            raise ValueError("need one weight block per bucket")

    @property
    def buckets(self) -> int:
        return len(self.weights)

    def bucket(self, t: float) -> int:
        return int(np.clip(np.searchsorted(self.bucket_edges, t, side="left") - 1, 0, self.buckets - 1))

    def bind(self, cond: np.ndarray):
        static = _static_features(cond, self.patch_radius, measurement_context(cond))
        n = cond.shape[1]

        def predict(state: DiffusionState) -> DenoiserOutput:
            t = _check_t(state.t)
            pred = _features(state.x, t, self.patch_radius, static) @ self.weights[self.bucket(t)]
            return DenoiserOutput(pred[:, 0].reshape(n, n), pred[:, 1].reshape(n, n))

        return predict

    def __call__(self, state: DiffusionState, cond: np.ndarray) -> DenoiserOutput:
        return self.bind(cond)(state)

    # little-endian: magic, version, buckets, patch_radius, feature dim, then
    # float64 weight blocks (feature_dim x 2, row-major) per bucket
    def to_bytes(self) -> bytes:
        head = struct.pack("<4sIIII", self.MAGIC, self.VERSION, self.buckets,
                           self.patch_radius, self.weights.shape[1])
        return head + self.weights.astype("<f8").tobytes(order="C")

    @classmethod
    def from_bytes(cls, blob: bytes) -> "RidgeDenoiserModel":
        magic, version, buckets, radius, fdim = struct.unpack_from("<4sIIII", blob)
        if magic != cls.MAGIC:
            raise ValueError("not a ridge denoiser blob")
        if version != cls.VERSION:
            raise ValueError(f"unsupported blob version {version}")
        if fdim != feature_dim(radius):
            raise ValueError(f"feature dim {fdim} does not match patch radius {radius}")
        w = np.frombuffer(blob, dtype="<f8", offset=struct.calcsize("<4sIIII"))
        if w.size != buckets * fdim * 2:
            raise ValueError("truncated weight blocks")
        return cls(w.reshape(buckets, fdim, 2).astype(float), radius,
                   bucket_edges=np.linspace(0.0, 1.0, buckets + 1))

    def save(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(self.to_bytes())
        tmp.replace(path)

    @classmethod
    def load(cls, path) -> "RidgeDenoiserModel":
        return cls.from_bytes(Path(path).read_bytes())


def train_ridge_denoiser(dataset, schedule: DiffusionSchedule | None = None, patch_radius: int = 2,
                         ridge_lambda: float = 1e-3, seed: int = 0, buckets: int = 10,
                         pixels_per_sample: int = 512, draws: int = 2) -> RidgeDenoiserModel:
    """Fit the ridge denoiser on ``(condition, x0)`` pairs.

    For every bucket and training pair, ``draws`` forward samples are taken at
    times uniform in the bucket and ``pixels_per_sample`` pixels enter the
    normal equations. ``schedule`` only supplies the terminal time.
    """
    dataset = list(dataset)
    if not dataset:
        raise ValueError("empty training set")
    if patch_radius < 0:
        raise ValueError("patch_radius must be non-negative")
    eps_min = (schedule or DiffusionSchedule()).eps_min
    rng = np.random.default_rng(seed)
    statics = [(_static_features(c, patch_radius, measurement_context(c)), np.asarray(x0, dtype=float))
               for c, x0 in dataset]
    fdim = feature_dim(patch_radius)
    edges = np.linspace(0.0, 1.0, buckets + 1)
    weights = np.zeros((buckets, fdim, 2))
    for b in range(buckets):
        lo, hi = max(edges[b], eps_min), edges[b + 1]
        gram = np.zeros((fdim, fdim))
        rhs = np.zeros((fdim, 2))
        for static, x0 in statics:
            npx = x0.size
            for _ in range(draws):
                t = float(rng.uniform(lo, hi))
                eps = rng.standard_normal(x0.shape)
                x_t = (1 - t) * x0 + math.sqrt(t) * eps
                rows = rng.choice(npx, size=min(pixels_per_sample, npx), replace=False)
                X = _features(x_t, t, patch_radius, static, rows)
                Y = np.column_stack([x0.reshape(-1)[rows], eps.reshape(-1)[rows]])
                gram += X.T @ X
                rhs += X.T @ Y
        weights[b] = _ridge_solve(gram, rhs, ridge_lambda)
    return RidgeDenoiserModel(weights, patch_radius, ridge_lambda, edges)


def _ridge_solve(gram: np.ndarray, rhs: np.ndarray, lam: float) -> np.ndarray:
    a = gram + lam * np.eye(len(gram))
    try:
        chol = np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem("ridge system is not positive definite; raise ridge_lambda") from exc
    if np.linalg.cond(a) > 1e15:
        raise SingularSystem("ridge system is numerically singular; raise ridge_lambda")
    w = np.linalg.solve(chol.T, np.linalg.solve(chol, rhs))
    if not np.isfinite(w).all():
        raise SingularSystem("non-finite ridge weights")
    return w

"""Knife-edge diffraction physics and edge-sampling information analysis.

The forward model used to synthesise radio maps is a log-distance law plus
knife-edge excess loss for up to three dominant obstructions (Deygout).
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    DegenerateGeometry,
    EmptyCandidates,
    InvalidGeometry,
    NonFinite,
    NotPSD,
    TxInsideBuilding,
)
from .geometry import EnvironmentGrid, GridPoint, _trace

SPEED_OF_LIGHT = 299_792_458.0
# dB span mapped onto [0, 1] for every normalised gain map in the pipeline
DYNAMIC_RANGE_DB = 100.0


@dataclass(frozen=True)
class PropagationParams:
    frequency: float = 5.9e9
    tx_power_dbm: float = 23.0
    pathloss_exponent: float = 2.0
    reference_loss_db: float | None = None  # free space at 1 m when None
    noise_floor_db: float = -120.0
    max_edges: int = 3

    def __post_init__(self):
        if not self.frequency > 0:
            raise InvalidGeometry("frequency must be positive")
        if not 1.5 <= self.pathloss_exponent <= 6:
            raise InvalidGeometry("pathloss_exponent must lie in [1.5, 6]")
        if self.reference_loss_db is None:
            object.__setattr__(self, "reference_loss_db",
                               20 * math.log10(4 * math.pi / self.wavelength))

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.frequency

    @property
    def wavenumber(self) -> float:
        return 2 * math.pi / self.wavelength

    def with_power(self, tx_power_dbm: float) -> "PropagationParams":
        return replace(self, tx_power_dbm=tx_power_dbm)


@dataclass(eq=False)
class RadioMap:
    values: np.ndarray
    tx: GridPoint
    params: PropagationParams = field(default_factory=PropagationParams)
    normalized: bool = False

    def normalize(self, free: np.ndarray, dynamic_range_db: float | None = None) -> "RadioMap":
        """dB map -> relative gain in [0, 1] with 1 at the strongest free cell.

        ``dynamic_range_db`` is the span mapped onto [0, 1]; it defaults to the
        gap between the peak and the noise floor.
        """
        if self.normalized:
            return self
        free = np.asarray(free, dtype=bool)
        peak = float(self.values[free].max())
        span = dynamic_range_db if dynamic_range_db is not None else peak - self.params.noise_floor_db
        if span <= 0:
            raise InvalidGeometry("dynamic range must be positive")
        v = np.clip(1.0 + (self.values - peak) / span, 0.0, 1.0)
        v[~free] = 0.0
        return RadioMap(v, self.tx, self.params, normalized=True)


# --------------------------------------------------------------------------
# Fresnel integrals


def _simpson_adaptive(f, a: float, b: float, tol: float, max_depth: int = 60) -> complex:
    fa, fm, fb = f(a), f(0.5 * (a + b)), f(b)
    whole = (b - a) / 6.0 * (fa + 4 * fm + fb)
    total = 0.0j
    stack = [(a, b, fa, fm, fb, whole, tol, 0)]
    while stack:
        a, b, fa, fm, fb, whole, tol, depth = stack.pop()
        m = 0.5 * (a + b)
        lm, rm = 0.5 * (a + m), 0.5 * (m + b)
        flm, frm = f(lm), f(rm)
        left = (m - a) / 6.0 * (fa + 4 * flm + fm)
        right = (b - m) / 6.0 * (fm + 4 * frm + fb)
        delta = left + right - whole
        if depth >= max_depth or abs(delta) <= 15 * tol:
            total += left + right + delta / 15.0
        else:
            stack.append((a, m, fa, flm, fm, left, 0.5 * tol, depth + 1))
            stack.append((m, b, fm, frm, fb, right, 0.5 * tol, depth + 1))
    return total


def _fresnel_kernel(t: float) -> complex:
    return complex(math.cos(0.5 * math.pi * t * t), math.sin(0.5 * math.pi * t * t))


def fresnel_integrals(nu: float, tol: float = 1e-10) -> tuple[float, float]:
    """``(C(nu), S(nu))`` by adaptive Simpson quadrature of exp(i*pi*t^2/2).

    The range is split into unit panels, each refined to ``tol``.
    """
    nu = float(nu)
    if not math.isfinite(nu):
        raise NonFinite(f"nu must be finite, got {nu}")
    x = abs(nu)
    if x == 0.0:
        return 0.0, 0.0
    edges = np.append(np.arange(0.0, x, 1.0), x)
    val = sum(_simpson_adaptive(_fresnel_kernel, float(lo), float(hi), tol)
              for lo, hi in zip(edges[:-1], edges[1:]) if hi > lo)
    s = 1.0 if nu > 0 else -1.0
    return s * val.real, s * val.imag


def knife_edge_field_ratio(nu: float, complementary: bool = False) -> complex:
    """Diffracted-to-incident field ratio ``(1+j)/2 * [C + jS]``.

    ``complementary=True`` evaluates the textbook shadow-side form with
    ``1/2 - C`` and ``1/2 - S`` instead.
    """
    c, s = fresnel_integrals(nu)
    if complementary:
        c, s = 0.5 - c, 0.5 - s
    return (1 + 1j) / 2 * complex(c, s)


# --------------------------------------------------------------------------
# Single knife edge


@dataclass(frozen=True)
class KnifeEdgeGeometry:
    h: float
    d1: float
    d2: float
    wavelength: float

    def __post_init__(self):
        if not (self.d1 > 0 and self.d2 > 0 and self.wavelength > 0):
            raise InvalidGeometry("d1, d2 and wavelength must be positive")


def diffraction_parameter(g: KnifeEdgeGeometry) -> float:
    return g.h * math.sqrt(2 * (g.d1 + g.d2)) / math.sqrt(g.wavelength * g.d1 * g.d2)


def excess_loss_db(nu):
    """Knife-edge excess loss in dB; 0 for nu <= -0.7 and never negative."""
    v = np.asarray(nu, dtype=float)
    with np.errstate(invalid="ignore"):
        loss = 6.9 + 20 * np.log10(np.sqrt((v - 0.1) ** 2 + 1) + v - 0.1)
    loss = np.where(v > -0.7, np.maximum(loss, 0.0), 0.0)
    return float(loss) if loss.ndim == 0 else loss


def fresnel_zone_width(wavelength: float, path_length: float) -> float:
    if wavelength <= 0 or path_length <= 0:
        raise InvalidGeometry("wavelength and path length must be positive")
    return math.sqrt(wavelength * path_length)


def tail_bound(e0: float, k: float, delta: float) -> float:
    """Upper bound on the edge-integral tail beyond distance ``delta``."""
    if k <= 0 or delta <= 0:
        raise InvalidGeometry("k and delta must be positive")
    return e0 / (math.pi * k * delta)


# --------------------------------------------------------------------------
# Multi-edge loss and radio map synthesis


def deygout_loss_db(edges, length: float, wavelength: float, antenna_height: float,
                    building_height: float, max_edges: int = 3) -> float:
    """Excess loss over a path crossing knife edges at distances ``edges``.

    The principal edge (largest nu over the whole path) is taken first, then
    the dominant edge on each side relative to the sub-path joining the
    endpoints to the principal edge's top.
    """
    if not edges or max_edges <= 0:
        return 0.0
    pts = [(0.0, antenna_height)] + [(float(d), building_height) for d in edges] + [(length, antenna_height)]

    def best(lo: int, hi: int):
        (xa, za), (xb, zb) = pts[lo], pts[hi]
        top, top_nu = None, -math.inf
        for k in range(lo + 1, hi):
            xe, ze = pts[k]
            d1, d2 = xe - xa, xb - xe
            if d1 <= 0 or d2 <= 0:
                continue
            h = ze - (za + (zb - za) * d1 / (xb - xa))
            nu = diffraction_parameter(KnifeEdgeGeometry(h, d1, d2, wavelength))
            if nu > top_nu:
                top, top_nu = k, nu
        return top, top_nu

    last = len(pts) - 1
    k, nu = best(0, last)
    if k is None:
        return 0.0
    total = excess_loss_db(nu)
    budget = max_edges - 1
    for lo, hi in ((0, k), (k, last)):
        if budget <= 0:
            break
        sub, sub_nu = best(lo, hi)
        if sub is not None and sub_nu > -0.7:
            total += excess_loss_db(sub_nu)
            budget -= 1
    return float(total)


def path_loss_db(env: EnvironmentGrid, tx, rx, params: PropagationParams) -> float:
    """Total loss between two free cells (distance clamped at 1 m)."""
    tx, rx = tuple(tx), tuple(rx)
    if tx == rx:
        return float(params.reference_loss_db)
    prof = _trace(env.occupancy, tx, rx, env.cell_size, env.blocking_height)
    d = max(prof.path_length, 1.0)
    loss = params.reference_loss_db + 10 * params.pathloss_exponent * math.log10(d)
    if prof.segments:
        loss += deygout_loss_db([s.distance for s in prof.segments], prof.path_length,
                                params.wavelength, env.antenna_height, env.building_height,
                                params.max_edges)
    return loss


def synthesize_radio_map(env: EnvironmentGrid, tx, params: PropagationParams | None = None) -> RadioMap:
    """Received power (dBm) at every cell for a transmitter at ``tx``."""
    params = params or PropagationParams()
    tx = GridPoint(*map(int, tx))
    if not env.is_free(tx):
        raise TxInsideBuilding(f"transmitter {tuple(tx)} is not a free cell")
    n = env.n
    out = np.full((n, n), params.noise_floor_db, dtype=float)
    rows, cols = np.nonzero(env.free)
    for r, c in zip(rows.tolist(), cols.tolist()):
        rx_db = params.tx_power_dbm - path_loss_db(env, tx, (r, c), params)
        out[r, c] = max(rx_db, params.noise_floor_db)
    return RadioMap(out, tx, params, normalized=False)


# --------------------------------------------------------------------------
# Edge discretisation and information measures


@dataclass
class EdgeDiscretization:
    """A straight diffracting edge cut into segments, observed by probes.

    ``edge_normal`` points into the shadow side; ``incident`` is the unit
    propagation direction of the illuminating wave.
    """

    positions: np.ndarray  # arc positions s_j (m), along the edge
    lengths: np.ndarray  # segment lengths
    probes: np.ndarray  # (N_p, 2) probe coordinates in the (along, across) plane
    wavelength: float
    sigma: float = 1.0
    incident: np.ndarray = field(default_factory=lambda: np.array([0.0, 1.0]))
    edge_normal: np.ndarray = field(default_factory=lambda: np.array([0.0, 1.0]))
    prior_cov: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float)
        self.lengths = np.asarray(self.lengths, dtype=float)
        self.probes = np.atleast_2d(np.asarray(self.probes, dtype=float))
        if self.sigma <= 0:
            raise InvalidGeometry("sigma must be positive")
        if self.prior_cov is None:
            # no probes yet: fall back to the edge span as the path scale
            dist = np.linalg.norm(self.probes, axis=1) if len(self.probes) else [self.lengths.sum()]
            ell = fresnel_zone_width(self.wavelength, max(float(np.median(dist)), 1e-9))
            self.prior_cov = exponential_prior(self.positions, ell)

    @property
    def centers(self) -> np.ndarray:
        return np.column_stack([self.positions, np.zeros_like(self.positions)])

    @property
    def k(self) -> float:
        return 2 * math.pi / self.wavelength

    def subset(self, rows) -> "EdgeDiscretization":
        return replace(self, probes=self.probes[list(rows)])


def uniform_edge(half_length: float, segments: int, probes, wavelength: float, **kw) -> EdgeDiscretization:
    """Evenly cut edge spanning ``[-half_length, half_length]``; apex at s=0."""
    bounds = np.linspace(-half_length, half_length, segments + 1)
    return EdgeDiscretization(0.5 * (bounds[:-1] + bounds[1:]), np.diff(bounds), probes, wavelength, **kw)


def exponential_prior(positions, correlation_length: float) -> np.ndarray:
    s = np.asarray(positions, dtype=float)
    return np.exp(-np.abs(s[:, None] - s[None, :]) / correlation_length).astype(complex)


def kirchhoff_matrix(disc: EdgeDiscretization) -> np.ndarray:
    """Green's-function matrix mapping segment fields to probe observations."""
    centers = disc.centers
    diff = disc.probes[:, None, :] - centers[None, :, :]
    r = np.linalg.norm(diff, axis=-1)
    if np.any(r <= 0):
        raise DegenerateGeometry("a probe coincides with a segment centre")
    normal = disc.edge_normal / np.linalg.norm(disc.edge_normal)
    inc = disc.incident / np.linalg.norm(disc.incident)
    cos_i = np.full(r.shape, float(inc @ normal))
    cos_d = (diff @ normal) / r
    return (disc.lengths[None, :] / (2 * math.pi)) * (cos_i + cos_d) * np.exp(1j * disc.k * r) / r


def fisher_information(K: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        raise InvalidGeometry("sigma must be positive")
    K = np.asarray(K)
    return (K.conj().T @ K) / sigma**2


def mutual_information(K: np.ndarray, C: np.ndarray, sigma: float) -> float:
    """Information (nats) the probes carry about the edge field, Gaussian prior."""
    if sigma <= 0:
        raise InvalidGeometry("sigma must be positive")
    K = np.atleast_2d(np.asarray(K, dtype=complex))
    C = np.atleast_2d(np.asarray(C, dtype=complex))
    if not np.allclose(C, C.conj().T, atol=1e-10):
        raise NotPSD("prior covariance is not Hermitian")
    if np.linalg.eigvalsh(C).min() < -1e-10:
        raise NotPSD("prior covariance has a negative eigenvalue")
    if K.shape[0] == 0:
        return 0.0
    A = np.eye(K.shape[0]) + (K @ C @ K.conj().T) / sigma**2
    A = 0.5 * (A + A.conj().T)
    L = np.linalg.cholesky(A)
    return float(np.sum(np.log(np.abs(np.diag(L)))))  # 0.5*logdet = sum log diag(L)


def greedy_probe_placement(disc: EdgeDiscretization, budget: int) -> tuple[list[int], list[float]]:
    """Greedy MI-maximising probe order over ``disc.probes``.

    Returns the chosen probe indices and the cumulative MI after each pick.
    """
    n = len(disc.probes)
    if n == 0:
        raise EmptyCandidates("no candidate probes")
    if budget > n:
        raise EmptyCandidates(f"budget {budget} exceeds {n} candidates")
    K = kirchhoff_matrix(disc)
    chosen: list[int] = []
    trace: list[float] = []
    for _ in range(budget):
        best, best_mi = None, -math.inf
        for j in range(n):
            if j in chosen:
                continue
            mi = mutual_information(K[chosen + [j]], disc.prior_cov, disc.sigma)
            if mi > best_mi + 1e-15:
                best, best_mi = j, mi
        chosen.append(best)
        trace.append(best_mi)
    return chosen, trace


def exhaustive_best_mi(disc: EdgeDiscretization, budget: int) -> tuple[tuple[int, ...], float]:
    K = kirchhoff_matrix(disc)
    return max(((s, mutual_information(K[list(s)], disc.prior_cov, disc.sigma))
                for s in itertools.combinations(range(len(disc.probes)), budget)),
               key=lambda t: t[1])

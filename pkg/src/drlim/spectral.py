"""Linearized convergence theory of the limiter iteration.

Once the clip pattern of the iterates freezes, the iteration is affine with
matrix

    T = lam * (c (I - P_A)(I - P_B) + c P_A P_B + (1 - c) P_B) + (1 - lam) I

where P_A = 11^T / N projects onto the mass direction and P_B is the
indicator of the active set. Its spectrum depends only on the single
nontrivial principal angle ``theta`` between the two null spaces, with
cos(theta) = sqrt(r / N).
"""
from __future__ import annotations

import cmath
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .limiter import Bounds, DRTrace, LimiterProblem, Regime, _step, select_parameters


class InsufficientTailError(ValueError):
    """Too few points in the asymptotic regime to fit a rate."""


@dataclass(frozen=True)
class ProblemGeometry:
    N: int
    active_set: tuple

    def __post_init__(self):
        active = tuple(sorted(int(i) for i in self.active_set))
        object.__setattr__(self, "active_set", active)
        if len(set(active)) != len(active):
            raise ValueError("duplicate indices in active set")
        if active and (active[0] < 0 or active[-1] >= self.N):
            raise ValueError("active index out of range")
        if not (0 < len(active) < self.N):
            raise ValueError(f"need 0 < r < N, got r={len(active)}, N={self.N}")

    @property
    def r(self) -> int:
        return len(self.active_set)

    @classmethod
    def from_solution(cls, x_star, bounds: Bounds) -> "ProblemGeometry":
        """Active set of a minimizer: entries sitting on m or M."""
        x_star = np.asarray(x_star, dtype=float)
        idx = np.flatnonzero((x_star <= bounds.m) | (x_star >= bounds.M))
        return cls(x_star.size, tuple(idx))


@dataclass
class SpectralReport:
    theta: float
    c: float
    lam: float
    rho0: float
    rho1: float
    rho2: complex
    rho3: complex
    c_star: float
    discriminant: float
    regime: Regime | None = None

    @property
    def moduli(self) -> tuple:
        return abs(self.rho0), abs(self.rho1), abs(self.rho2), abs(self.rho3)

    @property
    def predicted_rate(self) -> float:
        return max(self.moduli)


def principal_angle(geometry: ProblemGeometry) -> float:
    return math.acos(math.sqrt(geometry.r / geometry.N))


def principal_angles_svd(geometry: ProblemGeometry) -> np.ndarray:
    """All principal angles between null(A) and null(B), ascending, via SVD.

    A is the all-ones row and B selects the active entries; orthonormal
    bases come from ``scipy.linalg.null_space``.
    """
    N = geometry.N
    A0 = scipy.linalg.null_space(np.ones((1, N)))
    inactive = np.setdiff1d(np.arange(N), geometry.active_set)
    B0 = np.eye(N)[:, inactive]
    cosines = np.linalg.svd(A0.T @ B0, compute_uv=False)
    return np.arccos(np.clip(cosines, 0.0, 1.0))


def mass_direction_singular_values(geometry: ProblemGeometry) -> np.ndarray:
    """Singular values of (1/sqrt(N)) 1^T B0; the largest is sqrt((N - r)/N)."""
    N = geometry.N
    inactive = np.setdiff1d(np.arange(N), geometry.active_set)
    row = np.ones((1, N))[:, inactive] / math.sqrt(N)
    return np.linalg.svd(row, compute_uv=False)


def critical_c(theta: float) -> float:
    """c* = (1 - sin 2theta) / cos^2 2theta, written without the 0/0 at pi/4."""
    return 1.0 / (math.cos(theta) + math.sin(theta)) ** 2


def eigenvalues(theta: float, c: float, lam: float) -> tuple:
    """(rho0, rho1, rho2, rho3) of the linearized iteration.

    rho2 and rho3 solve
        rho^2 - (lam (c cos 2theta - 1) + 2) rho
              + lam^2 c sin^2 theta + lam (c cos 2theta - 1) + 1 = 0;
    they are real for c <= c* and a conjugate pair otherwise.
    """
    rho0 = 1.0 - lam * c
    rho1 = 1.0 - lam * (1.0 - c)
    cos2 = math.cos(2 * theta)
    trace = lam * (c * cos2 - 1.0) + 2.0
    disc = lam * lam * (c * c * cos2 * cos2 - 2.0 * c + 1.0)
    if c <= critical_c(theta):
        root = math.sqrt(max(disc, 0.0))
        rho2 = complex(0.5 * (trace + root))
        rho3 = complex(0.5 * (trace - root))
    else:
        imag = 0.5 * math.sqrt(max(-disc, 0.0))
        rho2 = complex(0.5 * trace, imag)
        rho3 = complex(0.5 * trace, -imag)
    return rho0, rho1, rho2, rho3


def complex_pair_modulus(theta: float, c: float, lam: float) -> float:
    """|rho2| = |rho3| when the pair is complex (c > c*)."""
    val = c * lam**2 * math.sin(theta) ** 2 - (1.0 - c * math.cos(2 * theta)) * lam + 1.0
    return math.sqrt(max(val, 0.0))


def spectral_report(theta: float, c: float, lam: float, regime: Regime | None = None) -> SpectralReport:
    rho0, rho1, rho2, rho3 = eigenvalues(theta, c, lam)
    cos2 = math.cos(2 * theta)
    disc = lam * lam * (c * c * cos2 * cos2 - 2.0 * c + 1.0)
    return SpectralReport(theta, c, lam, rho0, rho1, rho2, rho3, critical_c(theta), disc, regime)


def predicted_rate(theta: float, c: float, lam: float) -> float:
    return max(abs(rho) for rho in eigenvalues(theta, c, lam))


def rule_rate(theta: float) -> float:
    """Closed-form rate at the parameters returned by ``select_parameters``."""
    c, lam, regime = select_parameters(theta)
    cos2 = math.cos(2 * theta)
    if regime is Regime.CASE1:
        return -cos2 / (2.0 - cos2)
    if regime is Regime.CASE2:
        return 1.0 - lam * (1.0 - c)
    return c * cos2


def build_iteration_matrix(geometry: ProblemGeometry, c: float, lam: float) -> np.ndarray:
    """Dense T_{c,lam} for the all-ones constraint row.

    For a general full-row-rank A the projector A^+ A would replace the
    rank-one 11^T/N used here.
    """
    N = geometry.N
    I = np.eye(N)
    PA = np.full((N, N), 1.0 / N)
    PB = np.zeros((N, N))
    PB[geometry.active_set, geometry.active_set] = 1.0
    T = c * (I - PA) @ (I - PB) + c * PA @ PB + (1.0 - c) * PB
    return lam * T + (1.0 - lam) * I


def spectral_radius(T: np.ndarray) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(T))))


def _grid_objective(theta, c, lam):
    # max(|rho1|, |rho2|, |rho3|) on broadcast arrays; rho0 is left out
    cos2 = math.cos(2 * theta)
    rho1 = np.abs(1.0 - lam * (1.0 - c))
    trace = lam * (c * cos2 - 1.0) + 2.0
    const = lam**2 * c * math.sin(theta) ** 2 + lam * (c * cos2 - 1.0) + 1.0
    root = np.sqrt((trace * trace - 4.0 * const).astype(complex))
    rho2 = np.abs(0.5 * (trace + root))
    rho3 = np.abs(0.5 * (trace - root))
    return np.maximum(rho1, np.maximum(rho2, rho3))


def optimize_parameters_bruteforce(theta: float, n_c: int = 400, n_lam: int = 400):
    """Grid search of (c, lam) over (0, 1) x (0, 2].

    Returns ``(c, lam, value)`` minimizing max(|rho1|, |rho2|, |rho3|).
    The c grid is cell-centred so both open ends are excluded; the lam grid
    ends at 2.
    """
    if not (0.0 < theta <= math.pi / 2):
        raise ValueError(f"theta must lie in (0, pi/2], got {theta}")
    cs = (np.arange(n_c) + 0.5) / n_c
    lams = 2.0 * np.arange(1, n_lam + 1) / n_lam
    C, L = np.meshgrid(cs, lams, indexing="ij")
    obj = _grid_objective(theta, C, L)
    i, j = np.unravel_index(np.argmin(obj), obj.shape)
    return float(cs[i]), float(lams[j]), float(obj[i, j])


def minimax_objective(theta: float, c: float, lam: float) -> float:
    """The brute-force objective at a single point."""
    _, rho1, rho2, rho3 = eigenvalues(theta, c, lam)
    return max(abs(rho1), abs(rho2), abs(rho3))


def _active_mask(y, bounds):
    return (y <= bounds.m) | (y >= bounds.M)


def measure_asymptotic_rate(trace: DRTrace, y_star, bounds: Bounds,
                            drop_last: int = 3, min_points: int = 5,
                            floor: float | None = None) -> float:
    """Fit the linear rate of ``||y^k - y*||`` on the asymptotic tail.

    The window is the last contiguous run of iterates sharing one clip
    pattern, minus the final ``drop_last`` points. Errors at or below
    ``floor`` (default: 1e3 machine epsilons times ``max(1, ||y*||)``) are
    round-off and are dropped too. Returns exp(slope) of the least-squares
    fit of log error against iteration index.
    """
    if trace.y_iterates is None:
        raise ValueError("trace was recorded without iterates")
    Y = np.asarray(trace.y_iterates, dtype=float)
    y_star = np.asarray(y_star, dtype=float)
    if floor is None:
        floor = 1e3 * np.finfo(float).eps * max(1.0, float(np.linalg.norm(y_star)))

    masks = _active_mask(Y, bounds)
    start = len(Y) - 1
    while start > 0 and np.array_equal(masks[start - 1], masks[-1]):
        start -= 1
    stop = len(Y) - drop_last
    ks = np.arange(start, max(stop, start))
    errs = np.linalg.norm(Y[ks] - y_star, axis=1) if ks.size else np.empty(0)
    keep = errs > floor
    ks, errs = ks[keep], errs[keep]
    if ks.size < min_points:
        raise InsufficientTailError(
            f"only {ks.size} usable tail points (need {min_points})")
    slope = np.polyfit(ks.astype(float), np.log(errs), 1)[0]
    return float(math.exp(slope))


def geometric_rate(values, min_points: int = 5) -> float:
    """exp(slope) of log(values) against index; for a plain error sequence."""
    values = np.asarray(values, dtype=float)
    if values.size < min_points:
        raise InsufficientTailError(f"need {min_points} points, got {values.size}")
    slope = np.polyfit(np.arange(values.size, dtype=float), np.log(values), 1)[0]
    return float(math.exp(slope))


@dataclass
class FixedPointCertificate:
    """A candidate fixed point y* = x* + gamma*eta.

    Only ``gamma_eta`` is stored: gamma is never materialized because the
    iteration depends on c alone, and all sign checks are scale-free.
    """

    x_star: np.ndarray
    gamma_eta: np.ndarray

    @property
    def y_star(self) -> np.ndarray:
        return self.x_star + self.gamma_eta

    @classmethod
    def from_result(cls, result) -> "FixedPointCertificate":
        return cls(np.asarray(result.x_star, dtype=float),
                   np.asarray(result.y_final, dtype=float) - result.x_star)


@dataclass
class FixedPointCheck:
    ok: bool
    failures: list = field(default_factory=list)
    residuals: dict = field(default_factory=dict)

    def __bool__(self):
        return self.ok


def verify_fixed_point(cert: FixedPointCertificate, problem: LimiterProblem, c: float,
                       lam: float = 1.0, tol: float = 1e-10) -> FixedPointCheck:
    """Check the three fixed-point conditions.

    (i)   eta >= 0 where x* = M, eta <= 0 where x* = m, eta = 0 elsewhere;
    (ii)  eta + alpha (x* - u) is a constant vector (range of A^T);
    (iii) one iteration maps y* onto itself.
    With gamma*alpha = (1 - c)/c, (ii) reads
    gamma*eta + (1 - c)/c * (x* - u) = const.
    """
    x = np.asarray(cert.x_star, dtype=float)
    ge = np.asarray(cert.gamma_eta, dtype=float)
    m, M = problem.bounds.m, problem.bounds.M
    failures = []

    at_M = x >= M
    at_m = x <= m
    inner = ~(at_M | at_m)
    sign_res = max(
        float(np.max(-ge[at_M], initial=0.0)),
        float(np.max(ge[at_m], initial=0.0)),
        float(np.max(np.abs(ge[inner]), initial=0.0)),
    )
    if sign_res > tol or np.any(x < m) or np.any(x > M):
        failures.append("sign")

    v = ge + (1.0 - c) / c * (x - problem.u)
    range_res = float(np.max(v) - np.min(v))
    if range_res > tol:
        failures.append("range")

    y = cert.y_star
    _, y_next = _step(y, problem.u_hat, problem.b, problem.bounds, c, lam)
    fixed_res = float(np.max(np.abs(y_next - y)))
    if fixed_res > tol:
        failures.append("fixed_point")

    return FixedPointCheck(not failures, failures,
                           {"sign": sign_res, "range": range_res, "fixed_point": fixed_res})

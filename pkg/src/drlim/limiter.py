"""Conservative bound-preserving limiter for cell averages.

The limiter solves

    min ||x - u||_2^2   s.t.   m <= x_i <= M,   sum(x) = b

with a generalized Douglas-Rachford iteration whose parameters are picked
from the fraction of out-of-bound cells. An exact clip-and-shift solver is
provided as an independent check.
"""
from __future__ import annotations

import enum
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_EPSILON = 1e-13
DEFAULT_MAX_ITERS = 1000


class LimiterError(Exception):
    """Base class for limiter failures."""


class InfeasibleError(LimiterError):
    """The box and the mass hyperplane do not intersect."""


class NotConvergedError(LimiterError):
    """Iteration cap reached before the step-size test was met."""

    def __init__(self, result: "DRResult"):
        super().__init__(
            f"no convergence after {result.iterations} iterations "
            f"(last step {result.last_step:.3e})"
        )
        self.result = result


class Regime(enum.Enum):
    CASE1 = 1
    CASE2 = 2
    CASE3 = 3


@dataclass(frozen=True)
class Bounds:
    m: float
    M: float

    def __post_init__(self):
        if not (self.m < self.M):
            raise ValueError(f"need m < M, got m={self.m}, M={self.M}")

    def clip(self, v):
        return np.minimum(np.maximum(v, self.m), self.M)

    def violation(self, v) -> float:
        """Largest distance of any entry of `v` outside [m, M] (0 if inside)."""
        v = np.asarray(v, dtype=float)
        if v.size == 0:
            return 0.0
        return float(max(0.0, np.max(self.m - v), np.max(v - self.M)))


@dataclass
class LimiterProblem:
    """Projection of cell averages `u` onto the box-and-mass constraint set."""

    u: np.ndarray
    bounds: Bounds
    b: float | None = None

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=float).ravel()
        if self.u.size < 1:
            raise ValueError("need at least one cell")
        if not np.all(np.isfinite(self.u)):
            raise ValueError("cell averages must be finite")
        if self.b is None:
            self.b = float(math.fsum(self.u))
        self.b = float(self.b)

    @property
    def N(self) -> int:
        return self.u.size

    @property
    def u_hat(self) -> np.ndarray:
        """`u` moved by a constant so that it sums to `b`.

        The hyperplane step of the iteration keeps the sum of its input only
        when that sum is already `b`. On the hyperplane, distances to `u`
        and to `u_hat` differ by a constant, so the minimizer is the same.
        """
        defect = math.fsum(self.u) - self.b
        if defect == 0.0:
            return self.u
        return self.u - defect / self.N

    @property
    def feasible(self) -> bool:
        return self.N * self.bounds.m <= self.b <= self.N * self.bounds.M

    def check_feasible(self):
        if not self.feasible:
            raise InfeasibleError(
                f"target mass {self.b!r} outside [{self.N * self.bounds.m!r}, "
                f"{self.N * self.bounds.M!r}] for N={self.N}"
            )


@dataclass(frozen=True)
class DRConfig:
    """Parameters of the iteration.

    ``c`` stands for 1/(gamma*alpha + 1); the step size gamma and the weight
    alpha never appear separately. ``y0`` of None starts from the input
    averages. With ``relative=True`` the stopping threshold is
    ``epsilon * ||u||_2``.
    """

    c: float = 0.5
    lam: float = 4.0 / 3.0
    epsilon: float = DEFAULT_EPSILON
    max_iters: int = DEFAULT_MAX_ITERS
    y0: np.ndarray | None = None
    relative: bool = False
    record_iterates: bool = False

    def __post_init__(self):
        if not (0.0 < self.c < 1.0):
            raise ValueError(f"c must lie in (0, 1), got {self.c}")
        if not (0.0 < self.lam <= 2.0):
            raise ValueError(f"lambda must lie in (0, 2], got {self.lam}")
        if not (self.epsilon > 0.0):
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if int(self.max_iters) < 1:
            raise ValueError(f"max_iters must be positive, got {self.max_iters}")


@dataclass
class DRTrace:
    y_step_norms: list = field(default_factory=list)
    y_iterates: list | None = None


@dataclass
class DRResult:
    x_star: np.ndarray
    y_final: np.ndarray
    iterations: int
    converged: bool
    trace: DRTrace
    mass_defect: float = 0.0
    c: float | None = None
    lam: float | None = None
    r_hat: int | None = None
    theta_hat: float | None = None
    regime: Regime | None = None

    @property
    def last_step(self) -> float:
        return self.trace.y_step_norms[-1] if self.trace.y_step_norms else 0.0


def count_bad_cells(u, bounds: Bounds) -> int:
    u = np.asarray(u, dtype=float)
    if u.size == 0:
        raise ValueError("empty vector")
    return int(np.count_nonzero((u < bounds.m) | (u > bounds.M)))


def estimate_angle(r_hat: int, N: int) -> float:
    """Principal-angle estimate arccos(sqrt(r_hat / N))."""
    if N < 1 or not (0 <= r_hat <= N):
        raise ValueError(f"need 0 <= r_hat <= N and N >= 1, got r_hat={r_hat}, N={N}")
    return math.acos(math.sqrt(r_hat / N))


def select_parameters(theta_hat: float) -> tuple[float, float, Regime]:
    """Nearly optimal (c, lambda) for an estimated principal angle.

    Three regimes split at pi/4 and 3pi/8; the left end of each interval is
    open, so 3pi/8 falls in the middle regime and pi/4 in the last.
    """
    if not (0.0 < theta_hat <= math.pi / 2):
        raise ValueError(f"theta_hat must lie in (0, pi/2], got {theta_hat}")
    if theta_hat > 3 * math.pi / 8:
        return 0.5, 4.0 / (2.0 - math.cos(2 * theta_hat)), Regime.CASE1
    c_star = 1.0 / (math.cos(theta_hat) + math.sin(theta_hat)) ** 2
    if theta_hat > math.pi / 4:
        lam_star = 2.0 / (1.0 + 1.0 / (1.0 + 1.0 / math.tan(theta_hat)) - c_star)
        return c_star, lam_star, Regime.CASE2
    return c_star, 2.0, Regime.CASE3


def dr_iterate(y, problem: LimiterProblem, config: DRConfig):
    """One sweep of the explicit iteration. Returns ``(x_k, y_next)``."""
    return _step(np.asarray(y, dtype=float), problem.u_hat, problem.b, problem.bounds,
                 config.c, config.lam)


def _step(y, u, b, bounds, c, lam):
    x = np.minimum(np.maximum(y, bounds.m), bounds.M)
    z = 2.0 * x - y
    # np.sum uses a fixed pairwise order, so runs are bit-reproducible
    shift = (np.sum(z) - b) / y.size
    y_next = lam * c * (z - shift) + lam * (1.0 - c) * u + y - lam * x
    return x, y_next


def dr_solve(problem: LimiterProblem, config: DRConfig, strict: bool = False) -> DRResult:
    """Iterate until ``||y^{k+1} - y^k||_2 <= epsilon`` or the cap is hit.

    A capped run is returned with ``converged=False`` unless ``strict`` is
    set, in which case :class:`NotConvergedError` carries the result.
    """
    problem.check_feasible()
    bounds, u, b = problem.bounds, problem.u_hat, problem.b
    trace = DRTrace(y_iterates=[] if config.record_iterates else None)

    if problem.N == 1:
        # the mass constraint alone pins the single entry
        x = np.array([b])
        return DRResult(x, x.copy(), 0, True, trace, 0.0, config.c, config.lam)

    y = problem.u.copy() if config.y0 is None else np.array(config.y0, dtype=float)
    if y.shape != u.shape:
        raise ValueError("y0 has the wrong length")
    tol = config.epsilon
    if config.relative:
        tol *= max(float(np.linalg.norm(u)), np.finfo(float).tiny)
    if trace.y_iterates is not None:
        trace.y_iterates.append(y.copy())

    converged = False
    iterations = 0
    while iterations < config.max_iters:
        _, y_next = _step(y, u, b, bounds, config.c, config.lam)
        step = float(np.linalg.norm(y_next - y))
        y = y_next
        iterations += 1
        trace.y_step_norms.append(step)
        if trace.y_iterates is not None:
            trace.y_iterates.append(y.copy())
        if step <= tol:
            converged = True
            break

    x_star = bounds.clip(y)
    result = DRResult(
        x_star=x_star,
        y_final=y,
        iterations=iterations,
        converged=converged,
        trace=trace,
        mass_defect=float(math.fsum(x_star) - b),
        c=config.c,
        lam=config.lam,
    )
    if not converged:
        logger.warning("DR hit the cap of %d iterations (last step %.3e)",
                       config.max_iters, result.last_step)
        if strict:
            raise NotConvergedError(result)
    return result


def _clip_sum(u, t, bounds):
    return math.fsum(np.minimum(np.maximum(u + t, bounds.m), bounds.M))


def solve_shift(problem: LimiterProblem) -> float:
    """Root t of sum(clip(u + t)) = b by a scan over the sorted breakpoints.

    g(t) = sum(clip(u + t)) - b is nondecreasing and piecewise linear with
    kinks at m - u_i and M - u_i. Binary search brackets the root between
    two consecutive kinks, where g is affine and solved in closed form.
    """
    problem.check_feasible()
    u, b, bounds = problem.u, problem.b, problem.bounds
    if _clip_sum(u, 0.0, bounds) == b:
        return 0.0
    kinks = np.unique(np.concatenate([bounds.m - u, bounds.M - u]))
    # g(kinks[0]) = N*m - b <= 0 <= N*M - b = g(kinks[-1])
    lo, hi = 0, kinks.size - 1
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if _clip_sum(u, kinks[mid], bounds) - b <= 0.0:
            lo = mid
        else:
            hi = mid
    t0 = kinks[lo]
    g0 = _clip_sum(u, t0, bounds) - b
    if g0 >= 0.0 or kinks.size == 1:
        return float(t0)
    t_mid = 0.5 * (kinks[lo] + kinks[hi])
    free = np.count_nonzero((u + t_mid > bounds.m) & (u + t_mid < bounds.M))
    if free == 0:
        return float(kinks[hi])
    return float(min(t0 - g0 / free, kinks[hi]))


def project_box_hyperplane_oracle(problem: LimiterProblem) -> np.ndarray:
    """Exact minimizer ``clip(u + t)`` via :func:`solve_shift`."""
    if problem.N == 1:
        problem.check_feasible()
        return np.array([problem.b])
    t = solve_shift(problem)
    return problem.bounds.clip(problem.u + t)


def shift_cell_averages(field_averages, x_star) -> np.ndarray:
    """Per-cell constants that move each average onto ``x_star``."""
    field_averages = np.asarray(field_averages, dtype=float)
    x_star = np.asarray(x_star, dtype=float)
    if field_averages.shape != x_star.shape:
        raise ValueError("length mismatch")
    return x_star - field_averages


def limit_cell_averages(
    problem: LimiterProblem,
    epsilon: float = DEFAULT_EPSILON,
    max_iters: int = DEFAULT_MAX_ITERS,
    relative: bool = False,
    record_iterates: bool = False,
    strict: bool = False,
) -> DRResult:
    """Count bad cells, pick (c, lambda) from them, and run :func:`dr_solve`."""
    problem.check_feasible()
    N = problem.N
    r_hat = count_bad_cells(problem.u, problem.bounds)
    defect = float(math.fsum(problem.u) - problem.b)
    # round-off level mismatch only; a real mass change still needs DR
    if r_hat == 0 and abs(defect) <= 4 * N * np.finfo(float).eps * max(1.0, abs(problem.b)):
        trace = DRTrace(y_iterates=[problem.u.copy()] if record_iterates else None)
        return DRResult(problem.u.copy(), problem.u.copy(), 0, True, trace, defect, r_hat=0,
                        theta_hat=math.pi / 2)

    theta_hat = estimate_angle(r_hat, N)
    if r_hat == N and N > 1:
        floor = math.acos(math.sqrt((N - 1) / N))
        warnings.warn(
            f"all {N} cells out of bounds; clamping angle estimate to {floor:.3e}",
            RuntimeWarning,
            stacklevel=2,
        )
        theta_hat = max(theta_hat, floor)
    if N == 1:
        c, lam, regime = 0.5, 4.0 / 3.0, Regime.CASE1
    else:
        c, lam, regime = select_parameters(theta_hat)
    config = DRConfig(c=c, lam=lam, epsilon=epsilon, max_iters=max_iters,
                      relative=relative, record_iterates=record_iterates)
    result = dr_solve(problem, config, strict=strict)
    result.r_hat = r_hat
    result.theta_hat = theta_hat
    result.regime = regime
    return result

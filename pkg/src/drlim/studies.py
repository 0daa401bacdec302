"""Sweeps behind the CLI: rate study and accuracy study."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .dg1d import apply_two_stage_limiter, l2_error, l2_project, linf_error
from .limiter import (
    DEFAULT_EPSILON,
    Bounds,
    DRConfig,
    LimiterProblem,
    dr_iterate,
    limit_cell_averages,
    project_box_hyperplane_oracle,
)
from .spectral import (
    InsufficientTailError,
    ProblemGeometry,
    measure_asymptotic_rate,
    predicted_rate,
    principal_angle,
)

REFERENCE_ITERS = 1000


def random_instance(N: int, r: int, rng: np.random.Generator, bounds: Bounds = Bounds(-1.0, 1.0),
                    max_overshoot: float = 0.5) -> LimiterProblem:
    """Exactly `r` entries outside the box, the rest uniform inside it.

    Each bad entry sits beyond a randomly chosen bound by up to
    ``max_overshoot * (M - m) / 2``.
    """
    if not 0 <= r <= N:
        raise ValueError("need 0 <= r <= N")
    m, M = bounds.m, bounds.M
    u = rng.uniform(m, M, N)
    # uniform() may return m exactly; push such draws inside
    u[u <= m] = 0.5 * (m + M)
    idx = rng.choice(N, r, replace=False)
    over = rng.uniform(0.0, max_overshoot * 0.5 * (M - m), r)
    over[over == 0.0] = np.finfo(float).eps
    side = rng.integers(0, 2, r).astype(bool)
    u[idx] = np.where(side, M + over, m - over)
    return LimiterProblem(u, bounds)


@dataclass
class RateRow:
    N: int
    r: int
    r_exact: int
    theta_hat: float
    theta_exact: float
    c: float
    lam: float
    predicted_rate: float
    measured_rate: float
    iterations: int


def reference_fixed_point(problem: LimiterProblem, c: float, lam: float,
                          iters: int = REFERENCE_ITERS) -> np.ndarray:
    """``y`` after a fixed number of sweeps from ``y0 = u``, with no stopping test."""
    config = DRConfig(c=c, lam=lam)
    y = problem.u.copy()
    for _ in range(iters):
        _, y = dr_iterate(y, problem, config)
    return y


def rate_row(problem: LimiterProblem, epsilon: float = DEFAULT_EPSILON) -> RateRow:
    """Solve once with the parameter rule, then compare rates.

    ``y*`` comes from a 1000-iteration reference run with the same (c, lam);
    the exact active-set size comes from the clip-shift oracle.
    """
    res = limit_cell_averages(problem, epsilon=epsilon, record_iterates=True)
    if res.r_hat == 0:
        raise ValueError("no out-of-bound entries: nothing to measure")
    y_ref = reference_fixed_point(problem, res.c, res.lam)
    x_exact = project_box_hyperplane_oracle(problem)
    geom = ProblemGeometry.from_solution(x_exact, problem.bounds)
    theta = principal_angle(geom)
    pred = predicted_rate(theta, res.c, res.lam)
    try:
        measured = measure_asymptotic_rate(res.trace, y_ref, problem.bounds)
    except InsufficientTailError:
        measured = float("nan")
    return RateRow(problem.N, res.r_hat, geom.r, res.theta_hat, theta, res.c, res.lam,
                   pred, measured, res.iterations)


def rate_study(N: int, rs, seed: int = 0, epsilon: float = DEFAULT_EPSILON,
               bounds: Bounds = Bounds(-1.0, 1.0), map_fn=map):
    """Rows for each r in `rs` (r = 0 is skipped). Returns ``(rows, notes)``.

    Every row draws from its own generator seeded by ``(seed, r)`` so rows do
    not depend on the sweep order or on parallel execution.
    """
    notes = []
    todo = []
    for r in rs:
        r = int(r)
        if r == 0:
            notes.append(f"N={N}, r=0 skipped: no asymptotic regime to measure")
            continue
        todo.append(r)

    def one(r):
        rng = np.random.default_rng([seed, r])
        return rate_row(random_instance(N, r, rng, bounds), epsilon)

    return list(map_fn(one, todo)), notes


def smooth_bounded_profile(x):
    """1 - 2 sin^4(pi (x - 1/4)): periodic on [0, 1], range exactly [-1, 1].

    The maximum has quartic contact, so h^3-sized perturbations push the
    averages next to it above 1 on every mesh.
    """
    return 1.0 - 2.0 * np.sin(np.pi * (x - 0.25)) ** 4


def perturbation_weight(x):
    # zero mean on any uniform periodic grid; positive at the maximum
    return np.cos(2.0 * np.pi * (x - 0.25))


def perturbed_field(n_cells: int, degree: int, amplitude: float = 5.0, f=smooth_bounded_profile):
    field = l2_project(f, n_cells, degree)
    field.coeffs[:, 0] += amplitude * field.h ** (degree + 1) * perturbation_weight(field.cell_centers())
    return field


@dataclass
class AccuracyRow:
    mode: str
    n_cells: int
    h: float
    l2_error: float
    l2_order: float
    linf_error: float
    linf_order: float
    r_hat: int
    iterations: int
    mass_change: float


MODES = ("none", "average", "both")


def limit_averages_only(field, bounds, epsilon=DEFAULT_EPSILON):
    problem = LimiterProblem(field.averages, bounds)
    res = limit_cell_averages(problem, epsilon=epsilon)
    out = field.copy()
    out.coeffs[:, 0] = res.x_star
    return out, res


def _accuracy_point(mode, n, degree, amplitude, epsilon, bounds, f):
    field = perturbed_field(n, degree, amplitude, f)
    if mode == "average":
        out, res = limit_averages_only(field, bounds, epsilon)
    elif mode == "both":
        out, res = apply_two_stage_limiter(field, bounds, epsilon)
    else:
        out, res = field, None
    r_hat, iterations = (0, 0) if res is None else (res.r_hat, res.iterations)
    return (out.h, l2_error(out, f), linf_error(out, f), r_hat, iterations,
            out.mass - field.mass)


def accuracy_study(meshes, degree: int = 2, amplitude: float = 5.0,
                   epsilon: float = DEFAULT_EPSILON, bounds: Bounds = Bounds(-1.0, 1.0),
                   f=smooth_bounded_profile, map_fn=map):
    """Errors against `f` on each mesh for the three limiting modes.

    Orders compare each level with the previous one in `meshes`.
    """
    meshes = [int(n) for n in meshes]
    if len(meshes) < 3:
        raise ValueError("need at least three mesh levels")
    if any(n < 1 for n in meshes):
        raise ValueError("mesh sizes must be positive")
    points = [(mode, n) for mode in MODES for n in meshes]
    results = list(map_fn(lambda p: _accuracy_point(*p, degree, amplitude, epsilon, bounds, f),
                          points))
    rows = []
    prev = None
    for (mode, n), (h, e2, einf, r_hat, iterations, dmass) in zip(points, results):
        if prev is None or prev[0] != mode:
            o2 = oinf = float("nan")
        else:
            ratio = prev[1] / h
            o2 = math.log(prev[2] / e2) / math.log(ratio)
            oinf = math.log(prev[3] / einf) / math.log(ratio)
        rows.append(AccuracyRow(mode, n, h, e2, o2, einf, oinf, r_hat, iterations, dmass))
        prev = (mode, h, e2, einf)
    return rows


def rows_as_dicts(rows):
    return [asdict(r) for r in rows]

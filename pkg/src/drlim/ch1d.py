"""Periodic 1D Cahn-Hilliard driver on cell averages.

    phi_t = d/dx( Mob(phi) d/dx mu ),   mu = Phi'(phi) - eps^2 phi_xx

Time stepping is first-order convex splitting: the convex part of the
potential and the biharmonic term are implicit, the concave part explicit,
and the mobility is frozen at the previous step. For the Ginzburg-Landau
potential the cubic is linearized as phi_n^2 phi_{n+1}, so each step is
one sparse periodic pentadiagonal solve. The Flory-Huggins log term is
solved with damped Newton, whose updates keep every cell inside (-1, 1).

Fluxes telescope, so the discrete mass sum is conserved by construction.
"""
from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .limiter import DEFAULT_EPSILON, DEFAULT_MAX_ITERS, Bounds, LimiterProblem, limit_cell_averages

logger = logging.getLogger(__name__)

PHASE_BOUNDS = Bounds(-1.0, 1.0)


class CHError(RuntimeError):
    pass


class LinearSolveFailure(CHError):
    pass


class DomainViolation(CHError):
    """Flory-Huggins state left the open interval (-1, 1)."""


class Mobility(enum.Enum):
    CONSTANT = "constant"
    DEGENERATE = "degenerate"


class Potential(enum.Enum):
    GINZBURG_LANDAU = "gl"
    FLORY_HUGGINS = "fh"


@dataclass
class CHConfig:
    n_cells: int = 256
    length: float = 1.0
    dt: float = 1e-5
    eps_ch: float = 0.01
    mobility: Mobility = Mobility.CONSTANT
    potential: Potential = Potential.GINZBURG_LANDAU
    fh_alpha: float = 0.3
    fh_beta: float = 1.0
    end_step: int = 500
    limiter_enabled: bool = True
    epsilon: float = DEFAULT_EPSILON
    max_iters: int = DEFAULT_MAX_ITERS
    seed: int = 0
    newton_tol: float = 1e-12
    newton_max_iters: int = 50
    init_amplitude: float | None = None

    def __post_init__(self):
        self.mobility = Mobility(self.mobility)
        self.potential = Potential(self.potential)
        if self.init_amplitude is None:
            # the log potential needs a start strictly inside (-1, 1)
            fh = self.potential is Potential.FLORY_HUGGINS
            self.init_amplitude = 0.9 if fh else 1.0
        self.validate()

    @property
    def h(self) -> float:
        return self.length / self.n_cells

    def validate(self):
        if int(self.n_cells) < 3:
            raise ValueError("need at least 3 cells")
        for name in ("length", "dt", "eps_ch", "epsilon"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if int(self.end_step) < 0:
            raise ValueError("end_step must be >= 0")
        if int(self.max_iters) < 1:
            raise ValueError("max_iters must be positive")
        if not self.init_amplitude > 0:
            raise ValueError("init_amplitude must be positive")
        if self.potential is Potential.FLORY_HUGGINS:
            if not self.fh_alpha > 0:
                raise ValueError("Flory-Huggins needs fh_alpha > 0")
            if not self.init_amplitude < 1:
                raise ValueError("Flory-Huggins needs init_amplitude < 1")


@dataclass
class StepDiagnostics:
    step: int
    time: float
    mass: float
    r_hat: int
    bad_ratio: float
    dr_iterations: int
    mass_defect: float
    min_avg: float
    max_avg: float
    max_overshoot: float = 0.0
    dr_converged: bool = True


@dataclass
class CHState:
    step: int
    time: float
    averages: np.ndarray
    diagnostics: StepDiagnostics | None = None

    @property
    def mass(self) -> float:
        return 0.0 if self.averages.size == 0 else float(math.fsum(self.averages))


def random_initial(config: CHConfig, values=None) -> np.ndarray:
    """Seeded cellwise draw from `values` (spinodal start).

    `values` defaults to ``(-a, a)`` with ``a = config.init_amplitude``.
    """
    if values is None:
        values = (-config.init_amplitude, config.init_amplitude)
    rng = np.random.default_rng(config.seed)
    return rng.choice(np.asarray(values, dtype=float), size=config.n_cells)


def _laplacian(n: int, h: float) -> sp.csr_matrix:
    main = -2.0 * np.ones(n)
    off = np.ones(n - 1)
    Lap = sp.diags([off, main, off], [-1, 0, 1], shape=(n, n), format="lil")
    Lap[0, n - 1] = 1.0
    Lap[n - 1, 0] = 1.0
    return Lap.tocsr() / (h * h)


def _mobility_operator(phi: np.ndarray, config: CHConfig) -> sp.csr_matrix:
    """Flux-form d/dx(Mob d/dx .) with face mobilities from `phi`."""
    n, h = phi.size, config.h
    if config.mobility is Mobility.CONSTANT:
        face = np.ones(n)
    else:
        mid = 0.5 * (phi + np.roll(phi, -1))
        # negative degenerate mobility is meaningless outside [-1, 1]
        face = np.maximum(1.0 - mid * mid, 0.0)
    # face[i] sits between cell i and cell i+1
    left = np.roll(face, 1)
    D = sp.lil_matrix((n, n))
    idx = np.arange(n)
    D[idx, idx] = -(face + left)
    D[idx, (idx + 1) % n] = face
    D[idx, (idx - 1) % n] = left
    return D.tocsr() / (h * h)


def _solve(A, rhs):
    sol = spla.spsolve(A.tocsc(), rhs)
    if not np.all(np.isfinite(sol)):
        raise LinearSolveFailure("non-finite solution of the implicit step")
    return sol


def _gl_step(phi, D, Lap, config):
    n = phi.size
    eps2 = config.eps_ch**2
    implicit = sp.diags(phi * phi) - eps2 * Lap
    A = sp.identity(n, format="csr") - config.dt * (D @ implicit)
    rhs = phi + config.dt * (D @ (-phi))
    return _solve(A, rhs)


def _fh_step(phi, D, Lap, config):
    if np.any(np.abs(phi) >= 1.0):
        raise DomainViolation("Flory-Huggins state must stay inside (-1, 1)")
    n = phi.size
    a, beta = config.fh_alpha, config.fh_beta
    eps2 = config.eps_ch**2
    explicit = -beta * phi
    I = sp.identity(n, format="csr")
    new = phi.copy()
    for _ in range(config.newton_max_iters):
        mu = 0.5 * a * np.log((1.0 + new) / (1.0 - new)) - eps2 * (Lap @ new) + explicit
        F = new - phi - config.dt * (D @ mu)
        res = float(np.max(np.abs(F)))
        if res <= config.newton_tol:
            return new
        J = I - config.dt * (D @ (sp.diags(a / (1.0 - new * new)) - eps2 * Lap))
        delta = _solve(J, -F)
        # fraction-to-boundary damping
        room = np.where(delta > 0, (1.0 - new) / np.where(delta > 0, delta, 1.0),
                        np.where(delta < 0, (-1.0 - new) / np.where(delta < 0, delta, 1.0), np.inf))
        step = min(1.0, 0.99 * float(np.min(room)))
        new = new + step * delta
    raise LinearSolveFailure(f"Newton did not reach {config.newton_tol:g} "
                             f"in {config.newton_max_iters} iterations (residual {res:.3e})")


def ch_step(state: CHState, config: CHConfig) -> CHState:
    phi = np.asarray(state.averages, dtype=float)
    D = _mobility_operator(phi, config)
    Lap = _laplacian(phi.size, config.h)
    if config.potential is Potential.GINZBURG_LANDAU:
        new = _gl_step(phi, D, Lap, config)
    else:
        new = _fh_step(phi, D, Lap, config)

    r_hat = int(np.count_nonzero((new < -1.0) | (new > 1.0)))
    overshoot = PHASE_BOUNDS.violation(new)
    iterations, defect, converged = 0, 0.0, True
    if config.limiter_enabled:
        # conserve the pre-step sum so solve round-off cannot drift the mass
        problem = LimiterProblem(new, PHASE_BOUNDS, b=math.fsum(phi))
        res = limit_cell_averages(problem, epsilon=config.epsilon, max_iters=config.max_iters)
        new = res.x_star
        iterations, defect, converged = res.iterations, res.mass_defect, res.converged

    step = state.step + 1
    time = state.time + config.dt
    diag = StepDiagnostics(
        step=step,
        time=time,
        mass=config.h * math.fsum(new),
        r_hat=r_hat,
        bad_ratio=r_hat / new.size,
        dr_iterations=iterations,
        mass_defect=defect,
        min_avg=float(np.min(new)),
        max_avg=float(np.max(new)),
        max_overshoot=overshoot,
        dr_converged=converged,
    )
    return CHState(step, time, new, diag)


def initial_diagnostics(averages, config: CHConfig) -> StepDiagnostics:
    averages = np.asarray(averages, dtype=float)
    r_hat = int(np.count_nonzero((averages < -1.0) | (averages > 1.0)))
    return StepDiagnostics(0, 0.0, config.h * math.fsum(averages), r_hat,
                           r_hat / averages.size, 0, 0.0, float(np.min(averages)),
                           float(np.max(averages)), PHASE_BOUNDS.violation(averages))


def ch_run(config: CHConfig, initial=None, callback=None) -> list:
    """Run ``config.end_step`` steps; returns diagnostics including step 0."""
    config.validate()
    phi0 = random_initial(config) if initial is None else np.asarray(initial, dtype=float)
    if phi0.size != config.n_cells:
        raise ValueError(f"initial data has {phi0.size} cells, config says {config.n_cells}")
    state = CHState(0, 0.0, phi0.copy(), initial_diagnostics(phi0, config))
    out = [state.diagnostics]
    for _ in range(int(config.end_step)):
        state = ch_step(state, config)
        out.append(state.diagnostics)
        if callback is not None:
            callback(state)
    return out

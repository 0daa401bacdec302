import dataclasses

import numpy as np
import pytest

from drlim.ch1d import (
    CHConfig,
    CHState,
    DomainViolation,
    Mobility,
    Potential,
    ch_run,
    ch_step,
    initial_diagnostics,
    random_initial,
)


def small(**kw):
    base = dict(n_cells=64, end_step=20)
    base.update(kw)
    return CHConfig(**base)


@pytest.mark.parametrize("kw", [dict(dt=0.0), dict(eps_ch=-1.0), dict(length=0.0),
                                dict(n_cells=2), dict(end_step=-1),
                                dict(potential="fh", init_amplitude=1.0),
                                dict(potential="fh", fh_alpha=0.0)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        CHConfig(**kw)


def test_config_enums_from_strings():
    cfg = CHConfig(mobility="degenerate", potential="fh")
    assert cfg.mobility is Mobility.DEGENERATE and cfg.potential is Potential.FLORY_HUGGINS
    assert cfg.init_amplitude < 1
    assert cfg.h == pytest.approx(1 / 256)


@pytest.mark.parametrize("mobility", ["constant", "degenerate"])
@pytest.mark.parametrize("potential", ["gl", "fh"])
def test_constant_state_is_steady(mobility, potential):
    cfg = small(mobility=mobility, potential=potential)
    phi0 = np.full(cfg.n_cells, 0.3)
    diags = ch_run(cfg, phi0)
    for d in diags:
        assert d.min_avg == pytest.approx(0.3, abs=1e-13)
        assert d.max_avg == pytest.approx(0.3, abs=1e-13)
        assert d.mass == pytest.approx(diags[0].mass, abs=1e-14)


def test_zero_steps_gives_initial_snapshot():
    cfg = small(end_step=0)
    phi0 = random_initial(cfg)
    diags = ch_run(cfg, phi0)
    assert len(diags) == 1
    assert diags[0] == initial_diagnostics(phi0, cfg)


def test_spinodal_start_triggers_out_of_bounds_values():
    cfg = CHConfig(end_step=100, limiter_enabled=False)
    diags = ch_run(cfg)
    assert any(d.r_hat > 0 for d in diags[1:])


def test_limited_run_stays_in_bounds_and_conserves():
    cfg = CHConfig(end_step=100)
    diags = ch_run(cfg)
    assert any(d.r_hat > 0 for d in diags[1:])
    for d in diags[1:]:
        assert -1.0 <= d.min_avg and d.max_avg <= 1.0
        assert abs(d.mass_defect) <= 1e-11
        assert d.dr_converged


@pytest.mark.parametrize("limiter", [True, False])
@pytest.mark.parametrize("mobility", ["constant", "degenerate"])
def test_mass_conservation(limiter, mobility):
    cfg = CHConfig(end_step=60, limiter_enabled=limiter, mobility=mobility)
    diags = ch_run(cfg)
    m0 = diags[0].mass
    assert max(abs(d.mass - m0) for d in diags) <= 1e-10 * (1 + abs(m0))


def test_runs_are_deterministic():
    cfg = small(end_step=30, n_cells=128)
    a = ch_run(cfg)
    b = ch_run(dataclasses.replace(cfg))
    assert a == b


def test_seed_changes_initial_data():
    assert not np.array_equal(random_initial(small(seed=1)), random_initial(small(seed=2)))


def test_flory_huggins_stays_inside_without_limiting():
    cfg = CHConfig(potential="fh", end_step=100)
    diags = ch_run(cfg)
    assert all(d.r_hat == 0 for d in diags)
    assert all(-1 < d.min_avg and d.max_avg < 1 for d in diags)


def test_flory_huggins_rejects_pure_phases():
    cfg = small(potential="fh")
    state = CHState(0, 0.0, np.where(np.arange(cfg.n_cells) % 2, 1.0, -0.5))
    with pytest.raises(DomainViolation):
        ch_step(state, cfg)


def test_initial_data_length_checked():
    with pytest.raises(ValueError):
        ch_run(small(), np.zeros(5))


def test_callback_sees_every_step():
    seen = []
    ch_run(small(end_step=5), callback=lambda s: seen.append(s.step))
    assert seen == [1, 2, 3, 4, 5]


def test_gl_run_iteration_bound():
    diags = ch_run(CHConfig(n_cells=256, end_step=500))
    assert max(d.dr_iterations for d in diags) <= 20

from dataclasses import replace

import numpy as np
import pytest

from mapoi.control import FieldNoiseModel
from mapoi.exceptions import ConfigurationError
from mapoi.ga import GAParams
from mapoi.inversion import InversionConfig
from mapoi.oi import (
    OIConfig,
    OIContext,
    OptimalIdentification,
    Ramp,
    control_cost,
    field_penalty,
    run_conventional,
    run_oi,
)


@pytest.fixture(scope="module")
def tiny():
    return OIConfig(
        outer_ga=GAParams(pop_size=4, max_generations=1, batch_size=2),
        inversion=InversionConfig(n_family=10, ga=GAParams(pop_size=20, max_generations=10,
                                                           batch_size=10, immigrant_rate=0.25)),
        map_samples=2,
        noise=FieldNoiseModel(replicates=4),
    )


@pytest.fixture(scope="module")
def tiny_run(bundled, tiny):
    return run_oi(bundled, tiny, 7)


def test_field_penalty_hand_values(template):
    bounds = template.knob_bounds()
    n_c = bounds.shape[0]
    assert n_c == 14
    assert field_penalty(bounds[:, 0], bounds) == 0.0
    assert field_penalty(bounds[:, 1], bounds) == float(n_c)


def test_control_cost_field_term(bundled, tiny):
    ctx = OIContext(bundled, tiny, 0)
    lo, hi = ctx.knob_bounds[:, 0], ctx.knob_bounds[:, 1]
    top = ctx.run_trial(hi, 0)
    base = top.data_term + ctx.alpha(0) * top.width_term
    assert control_cost(hi, ctx, 0, 0, top) == pytest.approx(base + ctx.beta(0) * 14, rel=1e-12)
    bottom = ctx.run_trial(lo, 1)
    assert control_cost(lo, ctx, 1, 0, bottom) == bottom.data_term + ctx.alpha(0) * bottom.width_term
    # doubling beta only changes the field term, additively
    doubled = OIContext(bundled, replace(tiny, beta=Ramp(2e-4, 2e-2)), 0)
    diff = control_cost(hi, doubled, 0, 0, top) - control_cost(hi, ctx, 0, 0, top)
    assert diff == pytest.approx(ctx.beta(0) * 14, rel=1e-9)


def test_ramp():
    r = Ramp(1e-4, 1e-2)
    assert r.at(0, 10) == 1e-4 and r.at(10, 10) == 1e-2 and r.at(20, 10) == 1e-2
    assert r.at(5, 10) == pytest.approx(0.00505)
    with pytest.raises(ConfigurationError):
        Ramp(1e-2, 1e-4)
    with pytest.raises(ConfigurationError):
        Ramp(0.0, 1.0)


def test_config_invariants():
    with pytest.raises(ConfigurationError):
        OIConfig(Q=0)
    with pytest.raises(ConfigurationError):
        OIConfig(map_samples=1)


def test_oi_result_shape(tiny_run, bundled):
    r = tiny_run
    assert r.M == 8 and r.Q == 1
    assert np.all(r.delta >= 0)
    for grid in (r.h_grid, r.mu_grid):
        assert grid.shape == (8, 8) and np.array_equal(grid, grid.T)
    assert r.trial_fields == len(r.trials) == 4 + 4
    assert set(r.average) == {"H", "mu", "all"}
    # accounting identity: every map costs 1 + n_params * S solves
    acc = r.accounting
    assert acc.direct_solves == acc.map_builds * (1 + 64 * 2)
    assert 1 <= acc.map_builds <= r.trial_fields
    assert acc.data_solves == (r.trial_fields + 1) * 4


def test_zero_generations_is_valid(bundled, tiny):
    cfg = replace(tiny, outer_ga=GAParams(pop_size=3, max_generations=0, batch_size=3))
    r = run_oi(bundled, cfg, 1)
    assert r.trial_fields == 3 and np.isfinite(r.cost)
    best = min(r.trials, key=lambda t: (t.cost, t.eval_id))
    np.testing.assert_array_equal(r.pulse.knobs, np.clip(best.knobs, 0, None))


def test_oi_deterministic(bundled, tiny, tiny_run):
    again = run_oi(bundled, tiny, 7)
    assert again.rel_width.tobytes() == tiny_run.rel_width.tobytes()
    assert again.pulse.knobs.tobytes() == tiny_run.pulse.knobs.tobytes()


def test_conventional_observation_count(bundled, tiny):
    r = run_conventional(bundled, 25, tiny, 3)
    assert r.M == 200 and r.mode == "conventional" and r.trial_fields == 1
    assert r.accounting.map_builds == 1


def test_estimator_facade(bundled, tiny):
    est = OptimalIdentification(tiny, seed=5, conventional=True)
    rel = est.fit(bundled).transform()
    assert rel.shape == (64,) and np.all(rel >= 0)
    assert est.get_params()["seed"] == 5

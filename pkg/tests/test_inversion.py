import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mapoi.control import PulseShape
from mapoi.data import DirectSolver, LabDataset, MeasurementPlan
from mapoi.ga import GAParams
from mapoi.hdmr import MapDomain
from mapoi.inversion import (
    FamilyInverter,
    InversionConfig,
    InversionFamily,
    average_uncertainty,
    data_misfit,
    extract_family,
    family_bounds,
    family_uncertainty,
    inversion_cost,
    prior_rel_width,
    read_grid_csv,
    uncertainty_grids,
    write_grid_csv,
)

DOM1 = MapDomain(np.array([0.5]), np.array([1.5]), np.array([1.0]))


def dataset(values, template, err_rel=0.02):
    values = np.asarray(values, dtype=float)
    return LabDataset(values, err_rel, MeasurementPlan(Q=1, dimension=values.size), template)


def constant(pred):
    return lambda h: np.broadcast_to(np.asarray(pred, float), np.shape(h)[:-1] + (len(pred),))


# ------------------------------------------------------------------ cost hand checks

def test_cost_outside_bar(template):
    ds = dataset([0.5], template)
    assert inversion_cost(np.zeros(1), ds, constant([0.6])) == pytest.approx(0.04, abs=1e-15)


def test_cost_averages_over_measurements(template):
    ds = dataset([0.5, 0.5], template)
    assert inversion_cost(np.zeros(1), ds, constant([0.505, 0.6])) == pytest.approx(0.02, abs=1e-15)


def test_cost_zero_inside_bars(template):
    ds = dataset([0.5, 0.3], template)
    assert inversion_cost(np.zeros(1), ds, constant([0.505, 0.3059])) == 0.0
    assert inversion_cost(np.zeros(1), ds, constant([0.515, 0.3])) > 0


@given(arrays(float, 6, elements=st.floats(0.0, 1.0)), arrays(float, 6, elements=st.floats(0.0, 1.0)))
def test_cost_non_negative_and_zero_iff_inside(values, pred):
    scale = np.maximum(values, 1e-3)
    errors = 0.02 * scale
    mis = data_misfit(pred, values, errors, scale)
    assert mis >= 0
    assert (mis == 0) == bool(np.all(np.abs(values - pred) <= errors))


def test_regularization_adds(template):
    ds = dataset([0.5], template)
    h, nominal = np.array([1.1, 2.0]), np.array([1.0, 0.0])
    cost = inversion_cost(h, ds, constant([0.5]), lambda_reg=2.0, nominal=nominal)
    assert cost == pytest.approx(2.0 * 0.1**2)


def test_cost_rejects_wrong_length(template):
    with pytest.raises(ValueError):
        inversion_cost(np.zeros(1), dataset([0.5], template), constant([0.5, 0.5]))


# ------------------------------------------------------------------ bounds

def test_bounds_hand_example():
    fam = InversionFamily(np.array([[0.9], [1.0], [1.1]]), np.zeros(3), DOM1)
    b = family_bounds(fam)
    assert (b.lo[0], b.hi[0]) == (0.9, 1.1)
    assert b.width[0] == pytest.approx(0.2) and b.rel_width[0] == pytest.approx(0.2)


def test_single_member_has_zero_width():
    fam = InversionFamily(np.array([[0.7]]), np.zeros(1), DOM1)
    assert family_bounds(fam).width[0] == 0.0


@given(st.lists(st.floats(0.5, 1.5), min_size=2, max_size=12), st.randoms())
def test_bounds_order_invariant_and_monotone(xs, rnd):
    members = np.array(xs)[:, None]
    order = list(range(len(xs)))
    rnd.shuffle(order)
    shuffled = members[order]
    a = family_bounds(InversionFamily(members, np.zeros(len(xs)), DOM1))
    b = family_bounds(InversionFamily(shuffled, np.zeros(len(xs)), DOM1))
    assert a.lo == b.lo and a.hi == b.hi
    sub = family_bounds(InversionFamily(members[:-1], np.zeros(len(xs) - 1), DOM1))
    assert a.width[0] >= sub.width[0]


def test_degenerate_denominator_uses_half_width():
    dom = MapDomain(np.array([-1.0]), np.array([1.0]), np.array([0.0]))
    fam = InversionFamily(np.array([[-0.2], [0.2]]), np.zeros(2), dom)
    b = family_bounds(fam)
    assert b.degenerate[0] and b.rel_width[0] == pytest.approx(0.4)


def test_empty_family_rejected():
    with pytest.raises(ValueError):
        family_bounds(InversionFamily(np.empty((0, 1)), np.empty(0), DOM1))


# ------------------------------------------------------------------ uncertainty

def test_uncertainty_hand_example(template):
    # members with zero misfit and rel width 0.03 around 1.0
    fam = InversionFamily(np.array([[0.985], [1.015]]), np.zeros(2), DOM1)
    assert family_bounds(fam).rel_width[0] == pytest.approx(0.03)
    ds = dataset([0.5], template)
    u = family_uncertainty(fam, ds, constant([0.5]), alpha=0.01)
    assert u == pytest.approx(3e-4, rel=1e-12)
    assert family_uncertainty(fam, ds, constant([0.5]), alpha=0.02) == pytest.approx(2 * u, rel=1e-12)


def test_single_zero_misfit_member_scores_zero(template):
    fam = InversionFamily(np.array([[1.0]]), np.zeros(1), DOM1)
    assert family_uncertainty(fam, dataset([0.5], template), constant([0.5]), alpha=0.01) == 0.0


def test_unconverged_family_scored_with_prior(template):
    fam = InversionFamily(np.array([[1.0]]), [0.5], DOM1, converged=False)
    u = family_uncertainty(fam, dataset([0.5], template), constant([0.6]), alpha=0.01)
    assert u == pytest.approx(0.04 + 0.01 * prior_rel_width(DOM1)[0])
    assert prior_rel_width(DOM1)[0] == pytest.approx(1.0)


# ------------------------------------------------------------------ extraction

SMALL = InversionConfig(n_family=40, ga=GAParams(pop_size=30, max_generations=40, batch_size=10,
                                                 immigrant_rate=0.25))


@pytest.fixture(scope="module")
def cheap_problem(template):
    """Two free couplings of a 3-level system; exact direct predictor."""
    from mapoi.quantum import HamiltonianParams

    H = np.diag([0.0, 8.0, 17.0])
    mu = np.array([[0.0, 1.0, 0.2], [1.0, 0.0, 1.4], [0.2, 1.4, 0.0]])
    truth = HamiltonianParams.from_matrices(H, mu)
    pulse = PulseShape(np.array([8.0, 9.0]), np.array([1.0, 1.0]), np.zeros(2),
                               T=1.0, s=0.2)
    plan = MeasurementPlan(Q=2, dimension=3)
    solver = DirectSolver(pulse, plan)
    free = [6, 8]  # mu_01 and mu_12 (after the 6 upper-triangle H entries)
    return truth, pulse, plan, solver, free


def reduced(truth, solver, free):
    def predict(x):
        x = np.atleast_2d(x)
        h = np.tile(truth.values, (x.shape[0], 1))
        h[:, free] = x
        return solver(h)
    return predict


def test_truth_is_consistent_and_family_contains_it(cheap_problem):
    truth, pulse, plan, solver, free = cheap_problem
    values = solver(truth.values)
    ds = LabDataset(values, 0.5, plan, pulse)
    predict = reduced(truth, solver, free)
    assert inversion_cost(truth.values[free], ds, predict) == 0.0
    dom = MapDomain.around(truth.values[free], 0.3)
    fam = extract_family(ds, predict, dom, SMALL, seed=3)
    assert fam.converged and fam.size == SMALL.n_family
    assert np.all(fam.lo <= truth.values[free]) and np.all(truth.values[free] <= fam.hi)
    assert np.all(fam.residuals == 0.0)


def test_empty_dataset_rejected(cheap_problem):
    truth, pulse, plan, solver, free = cheap_problem
    ds = LabDataset(solver(truth.values), 0.5, plan, pulse)
    object.__setattr__(ds, "values", np.empty(0))
    with pytest.raises(ValueError, match="empty"):
        extract_family(ds, constant([]), DOM1, SMALL)


def test_unreachable_data_gives_flagged_single_member(template):
    ds = dataset([0.5], template, err_rel=1e-6)
    fam = extract_family(ds, lambda h: 0.1 * np.atleast_2d(h)[:, :1], DOM1, SMALL, seed=1)
    assert not fam.converged and fam.size == 1 and fam.flags == ["unconverged"]


def test_extraction_deterministic(cheap_problem):
    truth, pulse, plan, solver, free = cheap_problem
    ds = LabDataset(solver(truth.values), 0.1, plan, pulse)
    dom = MapDomain.around(truth.values[free], 0.3)
    a = extract_family(ds, reduced(truth, solver, free), dom, SMALL, seed=9)
    b = extract_family(ds, reduced(truth, solver, free), dom, SMALL, seed=9)
    assert a.members.tobytes() == b.members.tobytes()


def test_family_json_round_trip(tmp_path):
    fam = InversionFamily(np.array([[0.9], [1.1]]), [0.0, 0.0], DOM1, n_evals=7)
    path = tmp_path / "f.json"
    path.write_text(json.dumps(fam.to_dict()))
    back = InversionFamily.from_dict(json.loads(path.read_text()))
    np.testing.assert_array_equal(back.members, fam.members)
    assert back.n_evals == 7 and back.converged


def test_estimator_wrapper(cheap_problem):
    truth, pulse, plan, solver, free = cheap_problem
    ds = LabDataset(solver(truth.values), 0.5, plan, pulse)
    dom = MapDomain.around(truth.values[free], 0.3)
    est = FamilyInverter(n_family=20, pop_size=20, max_generations=20, seed=2)
    rel = est.fit(ds, reduced(truth, solver, free), dom).transform()
    assert rel.shape == (2,) and np.all(rel >= 0)
    assert est.get_params()["n_family"] == 20


# ------------------------------------------------------------------ grids

def test_grids_symmetric_and_placed(tmp_path):
    rel = np.arange(64, dtype=float)
    H, mu = uncertainty_grids(rel)
    assert np.array_equal(H, H.T) and np.array_equal(mu, mu.T)
    assert H[0, 0] == 0 and H[0, 1] == 1 and H[7, 7] == 35
    assert mu[0, 1] == 36 and mu[6, 7] == 63 and np.all(np.diag(mu) == 0)
    avg = average_uncertainty(rel)
    assert avg == {"H": pytest.approx(17.5), "mu": pytest.approx(49.5), "all": pytest.approx(31.5)}
    write_grid_csv(tmp_path / "g.csv", H)
    assert np.array_equal(read_grid_csv(tmp_path / "g.csv"), H)

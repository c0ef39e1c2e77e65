import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mapoi.data import DirectSolver, MeasurementPlan
from mapoi.exceptions import ConfigurationError, DomainError, MapBuildError
from mapoi.hdmr import CutHdmrMap, MapDomain, build_map, eval_map, validate_map
from mapoi.oi import OIConfig, domain_for


def additive(X):
    """Additively separable synthetic solver with two outputs."""
    X = np.atleast_2d(X)
    return np.column_stack([np.sin(X).sum(axis=1), np.cos(2 * X).sum(axis=1)])


def natural_spline(x, y, xs):
    """Natural cubic spline by a hand-rolled tridiagonal solve (second-derivative form)."""
    n = len(x)
    h = np.diff(x)
    A = np.zeros((n, n))
    r = np.zeros(n)
    A[0, 0] = A[-1, -1] = 1.0
    for i in range(1, n - 1):
        A[i, i - 1], A[i, i], A[i, i + 1] = h[i - 1], 2 * (h[i - 1] + h[i]), h[i]
        r[i] = 6 * ((y[i + 1] - y[i]) / h[i] - (y[i] - y[i - 1]) / h[i - 1])
    m = np.linalg.solve(A, r)
    out = []
    for t in np.atleast_1d(xs):
        k = min(max(np.searchsorted(x, t) - 1, 0), n - 2)
        a, b = x[k + 1] - t, t - x[k]
        out.append(m[k] * a**3 / (6 * h[k]) + m[k + 1] * b**3 / (6 * h[k])
                   + (y[k] / h[k] - m[k] * h[k] / 6) * a + (y[k + 1] / h[k] - m[k + 1] * h[k] / 6) * b)
    return np.array(out)


@pytest.fixture(scope="module")
def unit_domain():
    return MapDomain.around(np.full(64, 1.0), 0.3)


@pytest.fixture(scope="module")
def bundled_map(bundled, moderate_pulse):
    plan = MeasurementPlan(Q=1, dimension=8)
    solver = DirectSolver(moderate_pulse, plan)
    domain = domain_for(bundled, OIConfig())
    hdmr_map = CutHdmrMap(n_samples=4).fit(solver, domain, moderate_pulse)
    return hdmr_map, solver


# ---------------------------------------------------------------- domain

def test_domain_defaults_to_thirty_percent():
    d = MapDomain.around([10.0, -2.0, 0.0], zero_halfwidth=0.5)
    np.testing.assert_allclose(d.lower, [7.0, -2.6, -0.5])
    np.testing.assert_allclose(d.upper, [13.0, -1.4, 0.5])


def test_collapsed_domain_rejected():
    with pytest.raises(ConfigurationError):
        MapDomain([1.0, 1.0], [1.0, 2.0], [1.0, 1.5])
    with pytest.raises(ConfigurationError):
        MapDomain.around([1.0, 0.0], zero_halfwidth=0.0)


def test_domain_contains_with_slack():
    d = MapDomain([0.0], [1.0], [0.5])
    np.testing.assert_array_equal(d.contains(np.array([[1.0 + 5e-13], [1.0 + 1e-9]])).ravel(),
                                  [True, False])


# ---------------------------------------------------------------- build

def test_build_solve_count(unit_domain):
    calls = []

    def solver(X):
        calls.append(len(X))
        return additive(X)

    hdmr_map = build_map(solver, None, unit_domain, 6)
    assert hdmr_map.build_solves_ == 385 == sum(calls)


@pytest.mark.parametrize("S", [1, 0])
def test_too_few_samples_rejected(unit_domain, S):
    with pytest.raises(ConfigurationError):
        CutHdmrMap(n_samples=S).fit(additive, unit_domain)


def test_build_failure_names_the_node():
    domain = MapDomain.around(np.ones(3), 0.3)

    def fragile(X):
        X = np.atleast_2d(X)
        if np.any(X[:, 1] > 1.25):
            raise RuntimeError("solver diverged")
        return additive(X)

    with pytest.raises(MapBuildError) as info:
        CutHdmrMap(n_samples=4).fit(fragile, domain)
    assert info.value.variable == 1 and info.value.node == 3
    assert "variable 1, node 3" in str(info.value)


def test_non_finite_solver_output_is_a_build_error():
    domain = MapDomain.around(np.ones(2), 0.3)
    with pytest.raises(MapBuildError), np.errstate(divide="ignore", invalid="ignore"):
        CutHdmrMap(n_samples=3).fit(lambda X: np.log(np.atleast_2d(X) - 1.0), domain)


# ---------------------------------------------------------------- exactness

def test_reference_is_bit_exact(bundled_map):
    hdmr_map, _ = bundled_map
    assert hdmr_map.predict(hdmr_map.reference_).tobytes() == hdmr_map.f0_.tobytes()


@given(st.data())
def test_cut_node_exactness(bundled_map, data):
    hdmr_map, _ = bundled_map
    i = data.draw(st.integers(0, 63))
    j = data.draw(st.integers(0, hdmr_map.n_samples - 1))
    h = hdmr_map.reference_.copy()
    h[i] = hdmr_map.node_x_[i, j]
    np.testing.assert_allclose(hdmr_map.predict(h), hdmr_map.node_values_[i, j], rtol=0, atol=1e-10)


def test_terms_vanish_at_reference(bundled_map):
    hdmr_map, _ = bundled_map
    for i in range(0, 64, 7):
        assert not np.any(hdmr_map.term(i, hdmr_map.reference_[i]))


def test_terms_match_independent_spline(unit_domain):
    hdmr_map = CutHdmrMap(n_samples=6).fit(additive, unit_domain)
    xs = np.linspace(0.7, 1.3, 37)
    for i in (0, 17, 63):
        knots = hdmr_map.knots_[i]
        g = additive(np.ones((1, 64)) * 1.0)[0]
        y = np.array([additive(np.r_[np.ones(i), k, np.ones(63 - i)])[0, 0] - g[0] for k in knots])
        np.testing.assert_allclose(hdmr_map.term(i, xs)[:, 0], natural_spline(knots, y, xs),
                                   rtol=0, atol=1e-12)


def test_additive_function_reproduced(unit_domain):
    hdmr_map = CutHdmrMap(n_samples=12).fit(additive, unit_domain)
    X = unit_domain.sample(100, np.random.default_rng(0))
    assert np.max(np.abs(hdmr_map.predict(X) - additive(X))) < 1e-6


def test_refinement_does_not_increase_error(unit_domain):
    coarse = CutHdmrMap(n_samples=6).fit(additive, unit_domain).validate(additive, 100, 1)
    fine = CutHdmrMap(n_samples=12).fit(additive, unit_domain).validate(additive, 100, 1)
    assert fine.worst_rms <= coarse.worst_rms


@pytest.mark.parametrize("S", [2, 3])
def test_linear_fallback_interpolates_nodes(S):
    domain = MapDomain.around(np.ones(4), 0.3)
    hdmr_map = CutHdmrMap(n_samples=S).fit(additive, domain)
    h = np.ones(4)
    h[2] = hdmr_map.node_x_[2, -1]
    np.testing.assert_allclose(hdmr_map.predict(h), additive(h)[0], atol=1e-12)


# ---------------------------------------------------------------- evaluation

def test_out_of_domain_names_component(unit_domain):
    hdmr_map = CutHdmrMap(n_samples=4).fit(additive, unit_domain)
    h = np.ones(64)
    h[5] = 1.5
    with pytest.raises(DomainError) as info:
        eval_map(hdmr_map, h)
    assert info.value.component == 5 and "component 5" in str(info.value)


def test_single_and_batch_agree(unit_domain):
    hdmr_map = CutHdmrMap(n_samples=5).fit(additive, unit_domain)
    X = unit_domain.sample(4, np.random.default_rng(2))
    np.testing.assert_allclose(hdmr_map(X)[3], hdmr_map(X[3]), atol=1e-13)


def test_map_accuracy_on_bundled_system(bundled_map):
    hdmr_map, solver = bundled_map
    diag = hdmr_map.validate(solver, 100, np.random.default_rng(4))
    assert diag.worst_rms < 0.02


# ---------------------------------------------------------------- validation

def test_validate_self_consistency(unit_domain):
    hdmr_map = CutHdmrMap(n_samples=6).fit(additive, unit_domain)
    diag = validate_map(hdmr_map, hdmr_map.predict, 50, 3)
    assert diag.worst_rms < 1e-6 and not hdmr_map.flagged_


def test_validate_rejects_zero_points(unit_domain):
    hdmr_map = CutHdmrMap(n_samples=4).fit(additive, unit_domain)
    with pytest.raises(ValueError):
        hdmr_map.validate(additive, 0, 0)


def test_validate_reproducible_and_flags(bundled_map):
    hdmr_map, solver = bundled_map
    a = hdmr_map.validate(solver, 20, 77)
    b = hdmr_map.validate(solver, 20, 77)
    np.testing.assert_array_equal(a.rms_err, b.rms_err)
    assert hdmr_map.flagged_ == (a.worst_rms > hdmr_map.rms_threshold)
    assert a.build_solves == 1 + 64 * 4


def test_json_round_trip(tmp_path, bundled_map):
    hdmr_map, _ = bundled_map
    hdmr_map.save(tmp_path / "map.json")
    again = CutHdmrMap.load(tmp_path / "map.json")
    X = hdmr_map.domain_.sample(10, np.random.default_rng(8))
    assert again.predict(X).tobytes() == hdmr_map.predict(X).tobytes()
    assert again.pulse_.to_dict() == hdmr_map.pulse_.to_dict()


def test_estimator_params():
    assert CutHdmrMap(n_samples=7).get_params() == {"n_samples": 7, "order": 1,
                                                    "rms_threshold": 0.02}
    with pytest.raises(ConfigurationError):
        CutHdmrMap(order=2).fit(additive, MapDomain.around(np.ones(2)))


@given(st.integers(0, 2**32 - 1))
def test_evaluation_matches_piecewise_polynomials(bundled_map, seed):
    from scipy.interpolate import PPoly

    hdmr_map, _ = bundled_map
    X = hdmr_map.domain_.sample(7, np.random.default_rng(seed))
    n, K = hdmr_map.knots_.shape
    m = hdmr_map.f0_.size
    coef = hdmr_map.coef_matrix_.reshape(n, K - 1, 4, m)
    expected = np.tile(hdmr_map.f0_, (X.shape[0], 1))
    for i in range(n):
        expected += PPoly(coef[i].transpose(1, 0, 2), hdmr_map.knots_[i])(X[:, i])
    np.testing.assert_allclose(hdmr_map.predict(X), expected, rtol=0, atol=1e-13)
    np.testing.assert_allclose(hdmr_map.f0_ + hdmr_map.features(X) @ hdmr_map.coef_matrix_,
                               expected, rtol=0, atol=1e-13)

import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ampsc.estimation import (DisturbanceModelViolated, Observation, ParamBox,
                              SetMembershipEstimator, contains, nonfalsified, update)
from ampsc.geometry import Box, HPolytope, support
from ampsc.plant import PlantModel, TrueSystem, box_constraints, msd_chain

from oracles import vertices_by_enumeration


def scalar_model(w=0.1):
    """``x+ = theta x + u + w``."""
    return PlantModel(A0=[[0.0]], B0=[[1.0]], A_components=([[1.0]],), B_components=([[0.0]],),
                      disturbance=Box([0.0], [w]), constraints=box_constraints([10.0], [10.0]))


def interval(poly: HPolytope):
    return -support(poly, [-1.0]), support(poly, [1.0])


def test_nonfalsified_scalar_example():
    delta = nonfalsified(scalar_model(), Observation([1.0], [0.0], [0.5]))
    assert delta.n_rows == 2
    lo, hi = interval(delta)
    # by hand: 0.5 - theta in [-0.1, 0.1]
    assert (lo, hi) == (pytest.approx(0.4), pytest.approx(0.6))


def test_nonfalsified_uninformative_data():
    delta = nonfalsified(scalar_model(), Observation([0.0], [0.0], [0.05]))
    np.testing.assert_array_equal(delta.normals, 0.0)
    assert np.all(delta.offsets >= 0)


def test_update_examples():
    theta = ParamBox(Box.from_bounds([0.0], [1.0]))
    delta = nonfalsified(scalar_model(), Observation([1.0], [0.0], [0.5]))
    new = update(theta, delta)
    np.testing.assert_allclose(new.box.lower, 0.4, atol=1e-9)
    np.testing.assert_allclose(new.box.upper, 0.6, atol=1e-9)
    assert new.step_index == 1
    assert new.is_subset_of(theta)


def test_update_uninformative_keeps_box_exactly():
    theta = ParamBox(Box.from_bounds([0.0], [1.0]))
    wide = HPolytope([[1.0], [-1.0]], [5.0, 5.0])
    new = update(theta, wide)
    np.testing.assert_array_equal(new.center, theta.center)
    np.testing.assert_array_equal(new.half_widths, theta.half_widths)


def test_update_empty_intersection_freezes():
    theta = ParamBox(Box.from_bounds([0.0], [1.0]))
    far = HPolytope([[1.0], [-1.0]], [3.0, -2.0])
    with pytest.warns(DisturbanceModelViolated):
        new = update(theta, far)
    np.testing.assert_array_equal(new.half_widths, theta.half_widths)


def test_contains_examples():
    theta = ParamBox(Box([0.5], [0.1]))
    assert contains(theta, [0.55])
    assert not contains(theta, [0.61])
    with pytest.raises(ValueError):
        contains(theta, [0.5, 0.5])


def test_param_box_round_trip():
    theta = ParamBox(Box([0.1, 0.2], [0.01, 0.02]), 7)
    back = ParamBox.from_dict(theta.to_dict())
    np.testing.assert_array_equal(back.center, theta.center)
    assert back.step_index == 7


def test_identification_converges_without_disturbance():
    model = scalar_model(w=0.0)
    theta_star = 0.37
    est = SetMembershipEstimator(model, Box.from_bounds([0.0], [1.0]))
    rng = np.random.default_rng(0)
    x = 1.0
    for _ in range(200):
        u = rng.uniform(-1, 1)
        xn = theta_star * x + u
        est.observe([x], [u], [xn])
        x = xn
    assert est.theta.half_widths[0] <= 1e-6
    assert contains(est.theta, [theta_star])


def test_estimator_cadence_skips_updates():
    model = scalar_model()
    est = SetMembershipEstimator(model, Box.from_bounds([0.0], [1.0]), cadence=2)
    _, shrank = est.observe([1.0], [0.0], [0.5])
    assert not shrank and est.theta.half_widths[0] == 0.5
    _, shrank = est.observe([1.0], [0.0], [0.5])
    assert shrank


def test_estimator_counts_model_violations():
    est = SetMembershipEstimator(scalar_model(), Box.from_bounds([0.0], [1.0]))
    with pytest.warns(DisturbanceModelViolated):
        est.observe([1.0], [0.0], [5.0])
    assert est.violations == 1


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 3))
def test_update_is_tight_bounding_box(seed, p):
    rng = np.random.default_rng(seed)
    theta = ParamBox(Box(rng.uniform(-1, 1, p), rng.uniform(0.1, 1, p)))
    normals = rng.standard_normal((3, p))
    # offsets chosen so the intersection contains a known interior point
    inner = theta.center + 0.5 * theta.half_widths * rng.uniform(-1, 1, p)
    delta = HPolytope(normals, normals @ inner + rng.uniform(0.01, 0.5, 3))
    new = update(theta, delta)
    box = theta.box.to_hpolytope()
    verts = vertices_by_enumeration(np.vstack([box.normals, delta.normals]),
                                    np.concatenate([box.offsets, delta.offsets]))
    np.testing.assert_allclose(new.box.lower, verts.min(axis=0), atol=1e-7)
    np.testing.assert_allclose(new.box.upper, verts.max(axis=0), atol=1e-7)
    assert new.is_subset_of(theta)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["uniform", "adversarial"]))
def test_true_parameter_is_never_excluded(seed, mode):
    model, theta_star, theta0 = msd_chain(3, seed)
    sys = TrueSystem(model, theta_star, seed, mode)
    est = SetMembershipEstimator(model, theta0)
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, model.n)
    prev = est.theta
    for _ in range(40):
        u = rng.uniform(-1, 1, model.m)
        xn = sys.step(x, u)
        with warnings.catch_warnings():
            warnings.simplefilter("error", DisturbanceModelViolated)
            theta, _ = est.observe(x, u, xn)
        assert contains(theta, theta_star)
        assert theta.is_subset_of(prev)
        assert np.all(theta.half_widths <= prev.half_widths)
        prev, x = theta, np.clip(xn, -2, 2)

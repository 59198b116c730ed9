import math

import numpy as np
import pytest
from scipy import linalg

from errors import ContractionError, PreconditionError
from netmdp import make_rng
from stochapprox import (AggregationMap, ContractionOperator, SAState, WeightVector, bound_constants, fixed_point,
                         project_pi, sa_step, schedule_H, schedule_t0, td_bound_constants, weighted_norm, x_bar)
from tdq import random_mrp


def test_aggregation_map_must_be_surjective():
    with pytest.raises(PreconditionError, match="not surjective"):
        AggregationMap(np.array([0, 0, 2]), 3)
    h = AggregationMap.from_labels([1, 0, 1])
    assert h.m == 2 and h.n == 3
    assert h.phi([5.0, 7.0]).tolist() == [7.0, 5.0, 7.0]
    assert h.class_mass([0.2, 0.3, 0.5]).tolist() == pytest.approx([0.3, 0.7])


def test_weighted_norm():
    v = WeightVector([1.0, 2.0])
    assert weighted_norm([3.0, -8.0], v) == 4.0
    h = AggregationMap(np.array([0, 1, 1]), 2)
    assert weighted_norm([1.0, 4.0, -6.0], v, h) == 3.0
    with pytest.raises(PreconditionError):
        weighted_norm([1.0, 2.0, 3.0], v)
    with pytest.raises(PreconditionError):
        WeightVector([1.0, 0.0])


def test_projection_is_weighted_class_average():
    h = AggregationMap(np.array([0, 0, 1]), 2)
    pi = project_pi(h, [0.25, 0.25, 0.5], [2.0, 4.0, 9.0])
    assert pi.tolist() == pytest.approx([3.0, 9.0])
    with pytest.raises(PreconditionError):
        project_pi(h, [0.5, 0.5, 0.0], [1.0, 1.0, 1.0])


def test_projection_nonexpansive_and_lift_isometric(rng):
    h = AggregationMap(np.arange(12) % 4, 4)
    d = rng.dirichlet(np.ones(12))
    for _ in range(100):
        v = WeightVector(rng.uniform(0.5, 2.0, 4))
        y = rng.uniform(-5, 5, 12)
        x = rng.uniform(-5, 5, 4)
        assert weighted_norm(project_pi(h, d, y), v) <= weighted_norm(y, v, h) + 1e-12
        assert math.isclose(weighted_norm(h.phi(x), v, h), weighted_norm(x, v), rel_tol=1e-12)


def test_projected_bellman_operator_contracts():
    mrp = random_mrp(10, 0.8, make_rng(0, 'mrp'))
    h = AggregationMap(np.arange(10) % 5, 5)
    ratio = mrp.bellman_operator().contraction_ratio(h, mrp.stationary(), WeightVector.ones(5), make_rng(1), 200)
    assert ratio <= 0.8 + 1e-12


def test_fixed_point_with_identity_map_solves_bellman():
    mrp = random_mrp(6, 0.7, make_rng(0, 'mrp', 6))
    h = AggregationMap.identity(6)
    x = fixed_point(mrp.bellman_operator(), h, mrp.stationary(), tol=1e-12)
    exact = linalg.solve(np.eye(6) - 0.7 * mrp.P, mrp.mean_reward())
    assert np.allclose(x, exact, atol=1e-9)


def test_expanding_operator_raises_contraction_error():
    F = ContractionOperator(lambda y: 2.0 * y + 1.0, 0.5, 1.0, name='doubling')
    h = AggregationMap.identity(3)
    with pytest.raises(ContractionError, match="doubling"):
        fixed_point(F, h, np.full(3, 1 / 3))


def test_sa_step_updates_one_class():
    h = AggregationMap(np.array([0, 1, 1]), 2)
    state = SAState(h, H=2.0, t0=4.0)
    assert state.alpha() == 0.5
    sa_step(state, 2, 3.0, 1.0)
    assert state.x.tolist() == [0.0, 2.0]
    assert state.t == 1
    assert state.alpha() == pytest.approx(0.4)


def test_sa_step_noise_bound():
    state = SAState(AggregationMap.identity(2), H=1.0, t0=1.0, w_bar=0.5)
    with pytest.raises(AssertionError):
        sa_step(state, 0, 0.0, 1.0)


def test_schedule_helpers():
    assert schedule_H(0.1, 0.5) == pytest.approx(40.0)
    assert schedule_t0(1.0, 2.0, 100) == pytest.approx(4.0 * math.log(100))
    assert schedule_t0(10.0, 1.0, 3) == 40.0
    assert x_bar(0.5, 2.0, 1.0, 0.5) == pytest.approx((1.5 * 2.0 + 2.0) / 0.5)


def test_bound_constants_preconditions():
    H = schedule_H(0.2, 0.5)
    T = 1000
    t0 = schedule_t0(H, 2.0, T)
    constants = td_bound_constants(H, t0, T, 1.0, 2.0, 0.2, 0.5, 1.0, 5, 0.1)
    assert constants.Ca > 0 and constants.Ca_prime > 0
    with pytest.raises(PreconditionError):
        td_bound_constants(H, t0 + 1.0, T, 1.0, 2.0, 0.2, 0.5, 1.0, 5, 0.1)
    with pytest.raises(PreconditionError):
        td_bound_constants(H / 2, schedule_t0(H / 2, 2.0, T), T, 1.0, 2.0, 0.2, 0.5, 1.0, 5, 0.1)
    with pytest.raises(PreconditionError):
        td_bound_constants(H, schedule_t0(H, 2.0, 2), 2, 1.0, 2.0, 0.2, 0.5, 1.0, 5, 0.1)


def test_envelope_shrinks_with_horizon():
    H, K2 = schedule_H(0.2, 0.5), 2.0
    envelopes = []
    for T in (10 ** 3, 10 ** 5, 10 ** 7):
        t0 = schedule_t0(H, K2, T)
        constants = bound_constants(H, t0, T, 1.0, K2, 0.2, 0.5, 3.0, 1.0, 0.5, 1.0, 5, 0.1)
        envelopes.append(constants.envelope(T, t0))
    assert envelopes[0] > envelopes[1] > envelopes[2]

import numpy as np
import pytest

from envs import (COST_A_RANGE, COST_S_RANGE, EMPTY_ACTION, INFECTION_RANGE, RECOVERY_RANGE, SISDynamics,
                  SpreadConfig, WirelessConfig, WirelessDynamics, aloha_policy, build_environment, build_sis,
                  build_wireless, conflict_graph)
from errors import ConfigError, PreconditionError
from netmdp import GEOMETRIC, exact_objective, kernel_normalization_errors, make_rng
from validation_suite import (SCALES, check_sis_escape, check_wireless_chain, check_wireless_collision,
                              check_wireless_trivial)


def test_grid_access_points():
    config = WirelessConfig(h=2, w=2)
    access = config.access_lists()
    assert config.num_aps == 9
    assert access[0] == (0, 1, 3, 4)
    assert access[3] == (4, 5, 7, 8)
    assert len(WirelessConfig(h=2, w=2, c=2).access_lists()) == 8


def test_conflict_graph_joins_users_sharing_an_access_point():
    graph = conflict_graph(WirelessConfig(h=2, w=2).access_lists())
    assert len(graph.edges) == 6
    graph = conflict_graph([(0,), (1,), (1, 2)])
    assert graph.edges == frozenset({(1, 2)})


def test_wireless_config_preconditions():
    with pytest.raises(PreconditionError):
        WirelessConfig(d=0)
    with pytest.raises(PreconditionError):
        WirelessConfig(q=1.5)
    with pytest.raises(PreconditionError):
        WirelessConfig(h=1, w=1, ap_probs=(0.5,))


def test_wireless_network_shape():
    mdp = build_wireless(WirelessConfig(h=1, w=2, d=2), make_rng(0, 'environment'))
    assert mdp.n == 2
    assert mdp.state_sizes == (4, 4)
    assert mdp.action_sizes == (9, 9)
    assert all(0.0 <= p <= 1.0 for p in mdp.metadata['ap_probs'])
    assert kernel_normalization_errors(mdp) == []


def test_initial_queue_distribution():
    mdp = build_wireless(WirelessConfig(d=2, q=0.3, ap_probs=(1.0,), user_access=((0,),)), None)
    assert mdp.init_dist[0].tolist() == pytest.approx([0.7, 0.0, 0.3, 0.0])


def test_packets_age_and_expire():
    dyn = WirelessDynamics([(0,)], [1.0], 2, 0.0)
    assert dyn.transition_probs(0, (0,), (0b10,), (EMPTY_ACTION,)).tolist() == [0.0, 1.0, 0.0, 0.0]
    assert dyn.transition_probs(0, (0,), (0b01,), (EMPTY_ACTION,)).tolist() == [1.0, 0.0, 0.0, 0.0]


def test_delivery_clears_the_packet():
    dyn = WirelessDynamics([(0,)], [1.0], 2, 0.0)
    # action 2 sends the life-2 packet to the only access point
    assert dyn.decode(0, 0b10, 2) == (1, 0)
    assert dyn.transition_probs(0, (0,), (0b11,), (2,)).tolist() == [1.0, 0.0, 0.0, 0.0]
    assert dyn.expected_reward(0, (0,), (0b11,), (2,)) == 1.0


def test_sending_a_missing_packet_is_empty():
    dyn = WirelessDynamics([(0,)], [1.0], 2, 0.0)
    assert dyn.decode(0, 0b01, 2) is None
    assert dyn.expected_reward(0, (0,), (0b01,), (2,)) == 0.0


def test_arrivals_land_in_the_top_slot():
    dyn = WirelessDynamics([(0,)], [1.0], 2, 0.5)
    probs = dyn.transition_probs(0, (0,), (0b00,), (EMPTY_ACTION,))
    assert probs.tolist() == [0.5, 0.0, 0.5, 0.0]


def test_arrival_slot_is_free_after_aging():
    d = 3
    top = 1 << (d - 1)
    dyn = WirelessDynamics([(0,)], [0.6], d, 0.4)
    for bits in range(2 ** d):
        for delivered in (None, 0, 1, 2):
            assert not dyn._advance(bits, delivered) & top
        for action in range(1 + d):
            probs = dyn.transition_probs(0, (0,), (bits,), (action,))
            arrived = sum(probs[s] for s in range(2 ** d) if s & top)
            assert arrived == pytest.approx(0.4)
            assert probs.sum() == pytest.approx(1.0)
    # a full queue still admits the new packet
    assert dyn.sample_transition(0, (0,), (0b111,), (EMPTY_ACTION,), (0.9, 0.1)) == 0b111


def test_collision_on_shared_access_point():
    dyn = WirelessDynamics([(0,), (0,)], [1.0], 1, 0.0)
    assert dyn.expected_reward(0, (0, 1), (1, 1), (1, 1)) == 0.0
    assert dyn.expected_reward(0, (0, 1), (1, 1), (1, 0)) == 1.0
    assert dyn.expected_reward(0, (0, 1), (1, 0), (1, 1)) == 1.0


def test_aloha_policy_tables():
    mdp = build_wireless(WirelessConfig(h=1, w=2, d=2), make_rng(0, 'environment'))
    policy = aloha_policy(mdp, 0.3)
    for i in range(mdp.n):
        table = policy.probability_table(i)
        assert np.allclose(table.sum(axis=1), 1.0)
        assert table[0, EMPTY_ACTION] == 1.0
        assert table[0b11, EMPTY_ACTION] == pytest.approx(0.3)
        # least remaining life first: slot 0 actions only
        assert table[0b11, 5:].sum() == 0.0
        assert table[0b10, 1:5].sum() == 0.0
    with pytest.raises(PreconditionError):
        aloha_policy(mdp, 1.5)


def test_always_send_is_optimal_for_a_lone_user(lone_user):
    mdp = lone_user
    assert exact_objective(mdp, aloha_policy(mdp, 0.0)) == pytest.approx(1.0 / (1.0 - mdp.gamma))
    assert exact_objective(mdp, aloha_policy(mdp, 1.0)) == pytest.approx(0.0)


def test_sis_escape_probabilities():
    dyn = SISDynamics([2.0] * 3, [0.1] * 3, [0.3] * 3, [0.8] * 3)
    controlled = dyn.transition_probs(0, (0, 1, 2), (0, 1, 1), (1, 0, 1))
    assert controlled[0] == pytest.approx((1 - 0.8) * (1 - 0.2))
    uncontrolled = dyn.transition_probs(0, (0, 1, 2), (0, 1, 1), (0, 0, 1))
    assert uncontrolled[0] == pytest.approx((1 - 0.2) * (1 - 0.05))
    recovering = dyn.transition_probs(0, (0, 1), (1, 1), (0, 0))
    assert recovering.tolist() == pytest.approx([0.3, 0.7])
    assert dyn.expected_reward(1, (0, 1), (0, 1), (0, 1)) == pytest.approx(-2.1)


def test_sis_parameters_within_ranges():
    mdp = build_sis(SpreadConfig(h=3, w=3), make_rng(0, 'environment'))
    meta = mdp.metadata
    assert COST_S_RANGE[0] <= min(meta['c_s']) and max(meta['c_s']) <= COST_S_RANGE[1]
    assert COST_A_RANGE[0] <= min(meta['c_a']) and max(meta['c_a']) <= COST_A_RANGE[1]
    assert RECOVERY_RANGE[0] <= min(meta['p_r']) and max(meta['p_r']) <= RECOVERY_RANGE[1]
    assert INFECTION_RANGE[0] <= min(meta['p_h']) and max(meta['p_h']) <= INFECTION_RANGE[1]
    assert meta['p_m'] == pytest.approx([p / 4 for p in meta['p_h']])
    assert mdp.r_bar == pytest.approx(max(s + a for s, a in zip(meta['c_s'], meta['c_a'])))
    assert mdp.link_dist.kind == GEOMETRIC and mdp.link_dist.symmetric


def test_sis_config_validation():
    with pytest.raises(PreconditionError):
        SpreadConfig(h=2, w=2, c_s=(1.0, 2.0))
    with pytest.raises(PreconditionError):
        SpreadConfig(init_infection=1.2)


def test_build_environment_dispatch():
    rng = make_rng(0, 'environment')
    sis = build_environment({'kind': 'sis', 'graph': {'kind': 'cycle', 'n': 4}}, rng)
    assert sis.n == 4 and len(sis.graph.edges) == 4
    synthetic = build_environment({'kind': 'synthetic', 'graph': {'kind': 'path', 'n': 2},
                                   'links': {'kind': 'geometric', 'c': 1.0, 'lam': 0.5}}, rng)
    assert synthetic.n == 2 and synthetic.link_dist.kind == GEOMETRIC
    with pytest.raises(ConfigError):
        build_environment({'kind': 'traffic'}, rng)
    with pytest.raises(ConfigError, match="colour"):
        build_environment({'kind': 'wireless', 'colour': 'red'}, rng)
    with pytest.raises(ConfigError):
        build_environment({'kind': 'synthetic', 'graph': {'kind': 'star'}}, rng)


def test_environment_reproducible_from_seed():
    spec = {'kind': 'sis', 'h': 2, 'w': 2}
    first = build_environment(spec, make_rng(4, 'environment'))
    second = build_environment(spec, make_rng(4, 'environment'))
    assert first.describe() == second.describe()


def test_synthetic_rewards_bounded():
    mdp = build_environment({'kind': 'synthetic', 'r_bar': 2.0}, make_rng(0))
    assert kernel_normalization_errors(mdp) == []
    value = mdp.dynamics.expected_reward(0, (0, 1), (1, 0), (0, 1))
    assert 0.0 < value < 2.0


def test_wireless_and_sis_checks():
    scale = SCALES['quick']
    assert check_wireless_trivial(scale)['passed']
    assert check_wireless_collision(scale)['passed']
    assert check_sis_escape(scale)['passed']


@pytest.mark.slow
def test_wireless_rollouts_match_dense_chain():
    result = check_wireless_chain(SCALES['quick'])
    assert result['passed'], result['status']

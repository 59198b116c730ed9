import math

import numpy as np
import pytest

from errors import AgentIndexError, ChainError, KernelError, OracleCapError, PreconditionError
from netmdp import (ActiveLinkSetPair, AgentGraph, FunctionDynamics, LinkDistribution, LocalizedPolicy,
                    NetworkedMDP, TableDynamics, bellman_residual, build_dense_model, chain_stationary,
                    derive_seed, exact_local_q, exact_objective, kernel_normalization_errors, log_policy_gradient,
                    make_rng, mixing_constants, sample_links, solve_q, stationary_and_mixing, step)
from validation_suite import check_kernel_normalization


def _constant_mdp(gamma=0.8, reward=1.0, r_bar=1.0):
    dynamics = FunctionDynamics(lambda i, src, s, a: [0.5, 0.5], lambda i, src, s, a: reward)
    return NetworkedMDP(AgentGraph.path(2), [2, 2], [2, 2], LinkDistribution.static_local(1, 1), dynamics,
                        gamma, r_bar)


def _corrupted_mdp():
    kernels = {0: {((0,), (0,), (0,)): [0.5, 0.4], ((0,), (1,), (0,)): [0.5, 0.5]}}
    rewards = {0: {((0,), (0,), (0,)): 0.0, ((0,), (1,), (0,)): 0.0}}
    dynamics = TableDynamics(kernels, rewards, validate=False)
    return NetworkedMDP(AgentGraph(1), [2], [1], LinkDistribution.static_local(0, 0), dynamics, 0.9, 1.0)


def test_named_streams_are_reproducible():
    first = make_rng(3, 'inner', 0).random(5)
    again = make_rng(3, 'inner', 0).random(5)
    other = make_rng(3, 'inner', 1).random(5)
    assert np.array_equal(first, again)
    assert not np.array_equal(first, other)


def test_derive_seed_is_63_bit_and_stable():
    seed = derive_seed(11, 'replicate', 2)
    assert seed == derive_seed(11, 'replicate', 2)
    assert 0 <= seed < 2 ** 63
    assert seed != derive_seed(11, 'replicate', 3)


def test_grid_neighborhoods():
    graph = AgentGraph.grid(3, 3)
    assert graph.khop(4, 1) == (1, 3, 4, 5, 7)
    assert graph.exterior(4, 1) == (0, 2, 6, 8)
    assert graph.khop(0, 0) == (0,)
    assert graph.diameter == 4
    assert graph.max_neighborhood(1) == 5


def test_unreachable_agents_are_exterior():
    graph = AgentGraph(3, [(0, 1)])
    assert math.isinf(graph.distance[0, 2])
    assert graph.khop(0, 5) == (0, 1)
    assert graph.exterior(0, 5) == (2,)


def test_agent_index_out_of_range():
    graph = AgentGraph.path(3)
    with pytest.raises(AgentIndexError):
        graph.khop(3, 1)
    with pytest.raises(IndexError):
        graph.exterior(-1, 1)


def test_link_sets_require_self_loops():
    with pytest.raises(PreconditionError):
        ActiveLinkSetPair(np.zeros((2, 2), dtype=bool), np.eye(2, dtype=bool))


def test_link_sources_follow_influence_direction():
    links = ActiveLinkSetPair.from_pairs(3, ls_pairs=[(2, 0)], lr_pairs=[(0, 1)])
    assert links.state_sources(0).tolist() == [0, 2]
    assert links.state_sources(2).tolist() == [2]
    assert links.reward_sources(1).tolist() == [0, 1]


def test_static_local_links_are_deterministic():
    graph = AgentGraph.path(4)
    dist = LinkDistribution.static_local(1, 0)
    links = sample_links(dist, graph, make_rng(0, 'links'))
    assert np.array_equal(links.ls, graph.distance <= 1)
    assert np.array_equal(links.lr, np.eye(4, dtype=bool))


def test_geometric_support_is_a_distribution():
    graph = AgentGraph.path(3)
    support = LinkDistribution.geometric(1.0, 0.5).support(graph)
    assert support is not None
    assert math.isclose(sum(p for p, _ in support), 1.0, rel_tol=1e-12)
    ps, _ = LinkDistribution.geometric(1.0, 0.5).inclusion_probabilities(graph)
    assert ps[0, 1] == 0.5 and ps[0, 2] == 0.25 and ps[1, 1] == 1.0


def test_symmetric_geometric_links_mirror_pairs(rng):
    graph = AgentGraph.grid(3, 3)
    dist = LinkDistribution.geometric(1.0, 0.5, symmetric=True, reward_links='self')
    for _ in range(50):
        links = sample_links(dist, graph, rng)
        assert np.array_equal(links.ls, links.ls.T)
        assert np.array_equal(links.lr, np.eye(9, dtype=bool))


def test_custom_table_frequencies(rng):
    quiet = ActiveLinkSetPair.from_pairs(2)
    coupled = ActiveLinkSetPair.from_pairs(2, ls_pairs=[(0, 1), (1, 0)])
    dist = LinkDistribution.custom([(0.25, quiet), (0.75, coupled)])
    draws = 4000
    hits = sum(sample_links(dist, AgentGraph.path(2), rng) == coupled for _ in range(draws))
    se = math.sqrt(0.75 * 0.25 / draws)
    assert abs(hits / draws - 0.75) <= 4 * se


def test_link_distribution_rejects_bad_parameters():
    with pytest.raises(PreconditionError):
        LinkDistribution('ring')
    with pytest.raises(PreconditionError):
        LinkDistribution.geometric(1.0, 1.5)
    with pytest.raises(PreconditionError):
        LinkDistribution.custom([(0.5, ActiveLinkSetPair.from_pairs(2))])


def test_corrupted_kernel_rejected_on_construction():
    kernels = {0: {((0,), (0,), (0,)): [0.5, 0.4]}}
    with pytest.raises(KernelError, match="agent 0"):
        TableDynamics(kernels, {0: {((0,), (0,), (0,)): 0.0}})


def test_kernel_check_names_the_offending_row():
    mdp = _corrupted_mdp()
    bad = kernel_normalization_errors(mdp)
    assert len(bad) == 1
    assert bad[0].s_src == (0,)
    result = check_kernel_normalization(mdp)
    assert not result['passed']
    assert "agent 0 row (sources=(0,), s=(0,), a=(0,))" in result['status']


def test_fixture_kernels_are_normalized(path3):
    mdp, _ = path3
    assert kernel_normalization_errors(mdp) == []


def test_step_reads_only_active_sources(rng):
    dynamics = FunctionDynamics(lambda i, src, s, a: [1.0, 0.0] if len(src) == 1 else [0.0, 1.0],
                                lambda i, src, s, a: 0.0)
    graph = AgentGraph.path(2)
    for radius, expected in ((0, 0), (1, 1)):
        mdp = NetworkedMDP(graph, [2, 2], [1, 1], LinkDistribution.static_local(radius, 0), dynamics, 0.9, 1.0)
        links = sample_links(mdp.link_dist, graph, rng)
        s_next, rewards = step(mdp, [0, 1], [0, 0], links, rng)
        assert s_next.tolist() == [expected, expected]
        assert rewards.tolist() == [0.0, 0.0]


def test_step_passes_exactly_the_source_coordinates():
    seen = {}

    def kernel(i, src, s, a):
        seen[('kernel', i)] = (src, s, a)
        probs = np.zeros(3)
        probs[(sum((k + 1) * x for k, x in enumerate(s)) + sum(a)) % 3] = 1.0
        return probs

    def reward(i, src, s, a):
        seen[('reward', i)] = (src, s, a)
        return ((sum(s) + 2 * sum(a)) % 5) / 5.0

    n = 7
    graph = AgentGraph.path(n)
    mdp = NetworkedMDP(graph, [3] * n, [2] * n, LinkDistribution.static_local(1, 2),
                       FunctionDynamics(kernel, reward), 0.9, 1.0)
    links = sample_links(mdp.link_dist, graph, make_rng(0, 'links'))
    s = np.array([0, 1, 2, 1, 0, 2, 1])
    a = np.array([1, 0, 1, 1, 0, 0, 1])

    seen.clear()
    base_next, base_rewards = step(mdp, s, a, links, make_rng(0, 'step'))
    base_seen = dict(seen)
    for i in range(n):
        state_src = tuple(range(max(0, i - 1), min(n, i + 2)))
        reward_src = tuple(range(max(0, i - 2), min(n, i + 3)))
        assert base_seen[('kernel', i)] == (state_src, tuple(s[list(state_src)]), tuple(a[list(state_src)]))
        assert base_seen[('reward', i)] == (reward_src, tuple(s[list(reward_src)]), tuple(a[list(reward_src)]))

        outside = [j for j in range(n) if j not in reward_src]
        s_other, a_other = s.copy(), a.copy()
        s_other[outside] = (s_other[outside] + 1) % 3
        a_other[outside] = 1 - a_other[outside]
        seen.clear()
        other_next, other_rewards = step(mdp, s_other, a_other, links, make_rng(0, 'step'))
        assert seen[('kernel', i)] == base_seen[('kernel', i)]
        assert seen[('reward', i)] == base_seen[('reward', i)]
        assert other_next[i] == base_next[i]
        assert other_rewards[i] == base_rewards[i]


def test_step_rejects_rewards_above_bound(rng):
    mdp = _constant_mdp(reward=2.0)
    links = sample_links(mdp.link_dist, mdp.graph, rng)
    with pytest.raises(KernelError, match="exceeds declared bound"):
        step(mdp, [0, 0], [0, 0], links, rng)


def test_mdp_validates_local_spaces():
    dynamics = FunctionDynamics(lambda *args: [1.0], lambda *args: 0.0)
    with pytest.raises(PreconditionError):
        NetworkedMDP(AgentGraph.path(2), [1], [1, 1], LinkDistribution.static_local(0, 0), dynamics, 0.9, 1.0)
    with pytest.raises(PreconditionError):
        NetworkedMDP(AgentGraph.path(2), [1, 1], [1, 1], LinkDistribution.static_local(0, 0), dynamics, 1.0, 1.0)


def test_zero_theta_is_uniform(path3):
    mdp, _ = path3
    policy = LocalizedPolicy.for_mdp(mdp, 1)
    for i in range(mdp.n):
        assert np.allclose(policy.probability_table(i), 0.5)
    with pytest.raises(PreconditionError):
        policy.set_theta(0, np.zeros((3, 3)))


def test_log_gradient_rows_sum_to_zero(path2_beta1):
    _, policy = path2_beta1
    grad = log_policy_gradient(policy, 0, (1, 0), 1)
    row = policy.local_index(0, (1, 0))
    assert np.isclose(grad[row].sum(), 0.0)
    assert np.count_nonzero(np.delete(grad, row, axis=0)) == 0


def test_copy_does_not_share_parameters(path3):
    _, policy = path3
    clone = policy.copy()
    clone.ascend(0, np.ones_like(clone.theta[0]))
    assert not np.allclose(clone.theta[0], policy.theta[0])


def test_sample_action_follows_softmax_row(path3):
    _, policy = path3
    policy = policy.copy()
    k = policy.action_sizes[1]
    theta = np.zeros_like(policy.theta[1])
    theta[0, 0] = math.log(3.0 * (k - 1))
    policy.set_theta(1, theta)
    s_nb = (0,) * len(policy.neighborhoods[1])
    rng = make_rng(5, 'sample-action')
    draws = np.array([policy.sample_action(1, s_nb, rng) for _ in range(20000)])
    assert abs(np.mean(draws == 0) - 0.75) < 0.013
    assert draws.max() < k


def test_constant_reward_objective():
    mdp = _constant_mdp(gamma=0.8)
    policy = LocalizedPolicy.for_mdp(mdp, 0)
    assert math.isclose(exact_objective(mdp, policy), 5.0, rel_tol=1e-10)
    assert np.allclose(exact_local_q(mdp, policy, 1), 5.0)


def test_dense_q_satisfies_bellman(path3):
    mdp, policy = path3
    model = build_dense_model(mdp, policy)
    for i in range(mdp.n):
        q = solve_q(model, model.rewards[:, i])
        assert bellman_residual(model, model.rewards[:, i], q) <= 1e-9
    assert np.allclose(model.transition.sum(axis=1), 1.0)


def test_oracle_cap(path3):
    mdp, policy = path3
    with pytest.raises(OracleCapError):
        build_dense_model(mdp, policy, cap=10)


def test_two_state_stationary_distribution():
    P = np.array([[0.9, 0.1], [0.5, 0.5]])
    assert np.allclose(chain_stationary(P), [5 / 6, 1 / 6])
    K1, K2, mu2 = mixing_constants(P, chain_stationary(P))
    assert math.isclose(mu2, 0.4, rel_tol=1e-9)
    assert math.isclose(K2, -1.0 / math.log(0.4), rel_tol=1e-9)
    assert K1 >= 0.5


def test_periodic_chain_rejected():
    with pytest.raises(ChainError):
        chain_stationary(np.array([[0.0, 1.0], [1.0, 0.0]]))


def test_stationary_and_mixing_report(path3):
    mdp, policy = path3
    report = stationary_and_mixing(mdp, policy, 1)
    assert math.isclose(report.stationary.sum(), 1.0, rel_tol=1e-9)
    assert len(report.sigma_prime) == mdp.n
    assert all(0.0 < s <= 1.0 for s in report.sigma_prime)
    assert report.K2 >= 1.0

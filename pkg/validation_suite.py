#!/usr/bin/env python3
"""
Validation Suite
Oracle and invariant checks for every module, runnable by suite name
"""

from __future__ import annotations

import csv
import logging
import math
import tempfile
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np
from scipy.special import log_softmax

from decay import decay_table, estimate_mu, spread_samples
from envs import (SISDynamics, SpreadConfig, SyntheticConfig, WirelessConfig, aloha_policy, build_sis,
                  build_synthetic, build_wireless)
from errors import ConfigError, ScheduleWarning
from netmdp import (AgentGraph, LinkDistribution, LocalizedPolicy, build_dense_model, exact_local_q,
                    exact_objective, kernel_normalization_errors, log_policy_gradient, make_rng,
                    mixing_constants, monte_carlo_q, sample_links, stationary_and_mixing, step)
from run_verifier import RunVerifier
from sac import (SACConfig, TruncatedQTable, actor_gradient, critic_bound, critic_sup_error, critic_update,
                 evaluate_policy, evaluation_horizon, exact_policy_gradient, run, run_inner_loop)
from stochapprox import (AggregationMap, WeightVector, fixed_point, project_pi, schedule_H, schedule_t0,
                         td_bound_constants, weighted_norm)
from tdq import (abstraction_quality, aggregated_sigma, build_aggregated_mdp, q_learning_aggregated,
                 random_mrp, random_tabular_mdp, state_action_map, td0_aggregated, value_iteration)

logger = logging.getLogger(__name__)

SUITES = ('netmdp', 'decay', 'stochapprox', 'tdq', 'sac', 'envs', 'harness')

SCALES = {
    'quick': {
        'rollouts': 2000, 'spread_samples': 2000, 'kappas': (1, 2, 3), 'geo_kappas': (2, 3),
        'pairs': 200, 'td_T': 20_000, 'td_seeds': 2, 'q_T': 100_000, 'critic_T': 20_000,
        'critic_seeds': 3, 'critic_tol': 0.1, 'grad_loops': 400, 'grad_T': 60, 'grad_tol': 0.15,
        'sac_M': 40, 'sac_window': 10, 'wireless_rollouts': 4000,
        'aloha_seeds': 0,
    },
    'full': {
        'rollouts': 10_000, 'spread_samples': 10_000, 'kappas': (1, 2, 3, 4, 5), 'geo_kappas': (2, 3, 4, 5),
        'pairs': 1000, 'td_T': 100_000, 'td_seeds': 10, 'q_T': 1_000_000, 'critic_T': 200_000,
        'critic_seeds': 10, 'critic_tol': 0.05, 'grad_loops': 200, 'grad_T': 10_000, 'grad_tol': 0.05,
        'sac_M': 200, 'sac_window': 50, 'wireless_rollouts': 100_000,
        'aloha_seeds': 5, 'aloha_wins': 4, 'aloha_M': 200, 'aloha_T': 100, 'aloha_window': 100,
        'aloha_rollouts': 200, 'aloha_eval': 10,
    },
}

ALOHA_GRID = [k / 10 for k in range(11)]


def _result(suite, test, passed, measured=None, threshold=None, status=None):
    return {
        'suite': suite,
        'test': test,
        'passed': bool(passed),
        'status': status or ('ok' if passed else 'threshold exceeded'),
        'measured': measured,
        'threshold': threshold,
    }


# ======================================================================
# Shared fixtures
# ======================================================================

def path_fixture(n=3, seed=0, gamma=0.7, beta=0):
    """Synthetic path network with |S_i| = |A_i| = 2 and a fixed random softmax policy"""
    rng = make_rng(seed, 'fixture', n)
    mdp = build_synthetic(SyntheticConfig(graph=AgentGraph.path(n), gamma=gamma), rng)
    policy = LocalizedPolicy.for_mdp(mdp, beta)
    for i in range(n):
        policy.set_theta(i, 0.5 * rng.normal(size=policy.theta[i].shape))
    return mdp, policy


def isolated_user(q=1.0, d=1, p=1.0, gamma=0.7):
    return build_wireless(WirelessConfig(d=d, q=q, gamma=gamma, ap_probs=(p,), user_access=((0,),)), None)


def check_kernel_normalization(mdp, suite='netmdp') -> dict:
    """Fails with the first offending kernel row named in the status"""
    bad = kernel_normalization_errors(mdp)
    if bad:
        return _result(suite, 'kernel normalization', False, len(bad), 0,
                       f"{len(bad)} malformed row(s); first: {bad[0]}")
    return _result(suite, 'kernel normalization', True, 0, 0, 'all rows sum to 1')


# ======================================================================
# netmdp
# ======================================================================

def check_fixture_kernels(scale):
    mdp, _ = path_fixture()
    return check_kernel_normalization(mdp)


def check_dense_q_against_rollouts(scale):
    mdp, policy = path_fixture()
    q = exact_local_q(mdp, policy, 0)
    horizon = evaluation_horizon(mdp.gamma)
    s = np.zeros(mdp.n, dtype=np.int64)
    a = np.ones(mdp.n, dtype=np.int64)
    mean, se = monte_carlo_q(mdp, policy, 0, s, a, scale['rollouts'], horizon, make_rng(0, 'mc-q'))
    exact = q[0, int(np.ravel_multi_index(tuple(a), mdp.action_sizes))]
    tol = 4.0 * se + mdp.r_bar * mdp.gamma ** horizon / (1.0 - mdp.gamma)
    return _result('netmdp', 'dense Q matches rollouts', abs(mean - exact) <= tol, abs(mean - exact), tol)


def check_sis_link_symmetry(scale):
    mdp = build_sis(SpreadConfig(h=4, w=4), make_rng(0, 'sis'))
    rng = make_rng(0, 'links')
    asymmetric = 0
    for _ in range(200):
        links = sample_links(mdp.link_dist, mdp.graph, rng)
        if not np.array_equal(links.ls, links.ls.T) or not np.array_equal(links.lr, np.eye(mdp.n, dtype=bool)):
            asymmetric += 1
    return _result('netmdp', 'SIS links symmetric with self-only rewards', asymmetric == 0, asymmetric, 0)


# ======================================================================
# decay
# ======================================================================

def check_static_decay(scale):
    graph = AgentGraph.grid(6, 6)
    links = LinkDistribution.static_local(1, 1)
    gamma, i = 0.9, 14
    rows = decay_table(graph, links, 0, i, scale['kappas'], gamma, scale['spread_samples'])
    worst = max(row['mc_mean'] - row['exp_bound'] - 3.0 * row['mc_stderr'] for row in rows)
    below = 0
    for kappa in scale['kappas']:
        for sample in spread_samples(graph, links, 0, i, kappa, 200, gamma):
            if sample.x < (kappa - 1) / 1.0:
                below += 1
    passed = worst <= 0 and below == 0
    return _result('decay', 'static-local decay sandwich', passed, worst, 0.0,
                   f"max excess {worst:.4g}, {below} samples below the deterministic floor")


def check_geometric_decay(scale):
    graph = AgentGraph.grid(6, 6)
    links = LinkDistribution.geometric(1.0, 0.5)
    rows = decay_table(graph, links, 0, 14, scale['geo_kappas'], 0.9, scale['spread_samples'], c0=4.0, n0=1)
    worst = max(row['mc_mean'] - row['near_exp_bound'] - 3.0 * row['mc_stderr'] for row in rows)
    return _result('decay', 'geometric near-exponential bound', worst <= 0, worst, 0.0)


# ======================================================================
# stochapprox
# ======================================================================

def _mrp_fixture(seed=0, n=10, classes=5, gamma=0.8):
    mrp = random_mrp(n, gamma, make_rng(seed, 'mrp', n))
    return mrp, AggregationMap(np.arange(n) % classes, classes)


def check_contraction_properties(scale):
    mrp, h = _mrp_fixture()
    d = mrp.stationary()
    rng = make_rng(0, 'contraction')
    ratio = mrp.bellman_operator().contraction_ratio(h, d, WeightVector.ones(h.m), rng, scale['pairs'])
    violations = 0
    for _ in range(scale['pairs']):
        v = WeightVector(rng.uniform(0.5, 2.0, h.m))
        x = rng.uniform(-10, 10, h.m)
        y = rng.uniform(-10, 10, h.n)
        if weighted_norm(project_pi(h, d, y), v) > weighted_norm(y, v, h) + 1e-12:
            violations += 1
        if not math.isclose(weighted_norm(h.phi(x), v, h), weighted_norm(x, v), rel_tol=1e-12):
            violations += 1
    passed = ratio <= mrp.gamma + 1e-12 and violations == 0
    return _result('stochapprox', 'projected contraction and norm identities', passed, ratio, mrp.gamma,
                   f"ratio {ratio:.6f}, {violations} norm violations")


def check_fixed_point(scale):
    mrp, h = _mrp_fixture()
    d = mrp.stationary()
    F = mrp.bellman_operator()
    x = fixed_point(F, h, d, tol=1e-12)
    residual = float(np.abs(project_pi(h, d, F(h.phi(x))) - x).max())
    return _result('stochapprox', 'fixed point residual', residual <= 1e-9, residual, 1e-9)


# ======================================================================
# tdq
# ======================================================================

def check_value_iteration_methods(scale):
    mrp = random_mrp(12, 0.9, make_rng(0, 'mrp', 12))
    gap = float(np.abs(value_iteration(mrp) - value_iteration(mrp, tol=1e-13, method='iterate')).max())
    return _result('tdq', 'dense solve agrees with iteration', gap <= 1e-8, gap, 1e-8)


def _q_fixture(seed=0):
    mdp = random_tabular_mdp(6, 2, 0.8, make_rng(seed, 'mdp', 6))
    return mdp, AggregationMap(np.arange(6) % 3, 3), AggregationMap.identity(2)


def check_q_target_identity(scale):
    mdp, psi1, psi2 = _q_fixture()
    d = mdp.behavior_stationary()
    theta = fixed_point(mdp.optimality_operator(), state_action_map(psi1, psi2), d.ravel(), tol=1e-13)
    target = value_iteration(build_aggregated_mdp(mdp, psi1, psi2, d), tol=1e-13).ravel()
    gap = float(np.abs(theta - target).max())
    return _result('tdq', 'Q-learning target equals aggregated-MDP optimum', gap <= 1e-8, gap, 1e-8)


def q_learning_errors(T, seed=0, delta=0.1) -> dict:
    """
    Errors of aggregated Q-learning on the 6-state fixture after T steps

    Returns:
        dict: gap to the aggregated target theta*, sup error of Phi theta_T
        against Q*, and the high-probability bound on that error
    """
    mdp, psi1, psi2 = _q_fixture(seed)
    d = mdp.behavior_stationary().ravel()
    hz = state_action_map(psi1, psi2)
    target = fixed_point(mdp.optimality_operator(), hz, d, tol=1e-12)
    q_star = value_iteration(mdp, tol=1e-12).ravel()
    epsilon = abstraction_quality(q_star, hz).epsilon_qstar
    K1, K2, _ = mixing_constants(mdp.behavior_chain(), d)
    sigma = aggregated_sigma(hz, d)
    H = schedule_H(sigma, mdp.gamma)
    t0 = schedule_t0(H, K2, T)
    trace = q_learning_aggregated(mdp, psi1, psi2, H, t0, T, make_rng(seed, 'q-run'), sigma_prime=sigma)
    envelope = td_bound_constants(H, t0, T, K1, K2, sigma, mdp.gamma, mdp.r_bar, hz.m, delta).envelope(T, t0)
    return {
        'gap': float(np.abs(trace.theta.ravel() - target).max()),
        'target_error': float(np.abs(hz.phi(target) - q_star).max()),
        'q_star_error': float(np.abs(hz.phi(trace.theta.ravel()) - q_star).max()),
        'q_star_bound': envelope + 2.0 * epsilon / (1.0 - mdp.gamma),
        'epsilon': epsilon,
        'iterate_ok': trace.max_abs <= trace.bound + 1e-9,
        'r_bar': mdp.r_bar,
        'gamma': mdp.gamma,
    }


def check_q_learning_convergence(scale):
    errors = q_learning_errors(scale['q_T'])
    tol = 0.05 * errors['r_bar'] / (1.0 - errors['gamma'])
    passed = (errors['gap'] <= tol and errors['q_star_error'] <= errors['q_star_bound']
              and errors['iterate_ok'])
    return _result('tdq', 'aggregated Q-learning reaches its target', passed, errors['gap'], tol,
                   f"target gap {errors['gap']:.4g} (tol {tol:.4g}); Q* error {errors['q_star_error']:.4g} "
                   f"(bound {errors['q_star_bound']:.4g})")


def check_td_bound(scale):
    worst_margin = -math.inf
    iterate_ok = True
    T = scale['td_T']
    for seed in range(scale['td_seeds']):
        mrp, h = _mrp_fixture(seed)
        d = mrp.stationary()
        values = value_iteration(mrp)
        K1, K2, _ = mixing_constants(mrp.P, d)
        sigma = aggregated_sigma(h, d)
        H = schedule_H(sigma, mrp.gamma)
        t0 = schedule_t0(H, K2, T)
        constants = td_bound_constants(H, t0, T, K1, K2, sigma, mrp.gamma, mrp.r_bar, h.m, 0.1)
        bound = constants.envelope(T, t0) + abstraction_quality(values, h).zeta / (1.0 - mrp.gamma)
        trace = td0_aggregated(mrp, h, H, t0, T, make_rng(seed, 'td'), sigma_prime=sigma, log_every=T // 10)
        error = float(np.abs(h.phi(trace.theta) - values).max())
        worst_margin = max(worst_margin, error - bound)
        iterate_ok = iterate_ok and all(value <= trace.bound + 1e-9 for _, value in trace.checkpoints)
    return _result('tdq', 'TD aggregation error bound', worst_margin <= 0 and iterate_ok, worst_margin, 0.0)


# ======================================================================
# sac
# ======================================================================

def check_critic_replay(scale):
    rng = make_rng(0, 'replay')
    table = TruncatedQTable(0, 0, [0], [4], [1], 0.9)
    idx = rng.integers(4, size=101)
    rewards = rng.random(100)
    expected = np.zeros(4)
    for t in range(100):
        alpha = 10.0 / (t + 40.0)
        critic_update(table, int(idx[t]), rewards[t], int(idx[t + 1]), alpha)
        expected[idx[t]] = (1 - alpha) * expected[idx[t]] + alpha * (rewards[t] + 0.9 * expected[idx[t + 1]])
    gap = float(np.abs(table.dense() - expected).max())
    return _result('sac', 'critic replay matches hand recursion', gap <= 1e-12, gap, 1e-12)


def check_log_gradient(scale):
    mdp, policy = path_fixture(2, beta=1)
    worst = 0.0
    eps = 1e-6
    for row in range(policy.num_local_states[0]):
        s_nb = np.unravel_index(row, policy.local_dims[0])
        for a_i in range(mdp.action_sizes[0]):
            grad = log_policy_gradient(policy, 0, s_nb, a_i)
            for k in range(mdp.action_sizes[0]):
                theta = policy.theta[0][row].copy()
                up, down = theta.copy(), theta.copy()
                up[k] += eps
                down[k] -= eps
                numeric = (log_softmax(up)[a_i] - log_softmax(down)[a_i]) / (2 * eps)
                worst = max(worst, abs(numeric - grad[row, k]))
    return _result('sac', 'softmax log-gradient matches central differences', worst <= 1e-6, worst, 1e-6)


def _finite_difference_gradient(mdp, policy, i, eps=1e-4):
    grad = np.zeros_like(policy.theta[i])
    for idx in np.ndindex(grad.shape):
        values = []
        for sign in (1.0, -1.0):
            shifted = policy.copy()
            delta = np.zeros_like(grad)
            delta[idx] = sign * eps
            shifted.ascend(i, delta)
            values.append(exact_objective(mdp, shifted))
        grad[idx] = (values[0] - values[1]) / (2 * eps)
    return grad


def check_exact_gradient(scale):
    mdp, policy = path_fixture(2, beta=1)
    exact = exact_policy_gradient(mdp, policy, 0)
    numeric = _finite_difference_gradient(mdp, policy, 0)
    rel = float(np.linalg.norm(exact - numeric) / np.linalg.norm(numeric))
    return _result('sac', 'exact policy gradient matches finite differences', rel <= 1e-5, rel, 1e-5)


def check_actor_gradient_mean(scale):
    mdp, policy = path_fixture(2, beta=1)
    kappa = int(mdp.graph.diameter)
    model = build_dense_model(mdp, policy)
    tables = [TruncatedQTable.from_dense(mdp, j, kappa, exact_local_q(mdp, policy, j, model))
              for j in range(mdp.n)]
    config = SACConfig(kappa, 1, scale['grad_T'], 1, 1.0, 4.0, 0.1, mdp.gamma)
    total = np.zeros_like(policy.theta[0])
    for k in range(scale['grad_loops']):
        result = run_inner_loop(mdp, policy, config, make_rng(0, 'gradient', k), run_key=('gradient', k))
        total += actor_gradient(result.trajectory, tables, policy, config, 0)
    mean = total / scale['grad_loops']
    numeric = _finite_difference_gradient(mdp, policy, 0)
    rel = float(np.linalg.norm(mean - numeric) / np.linalg.norm(numeric))
    return _result('sac', 'mean actor gradient matches finite differences', rel <= scale['grad_tol'], rel,
                   scale['grad_tol'])


def _critic_schedule(mdp, policy, kappa, T, model):
    report = stationary_and_mixing(mdp, policy, kappa, model)
    sigma = min(report.sigma_prime)
    H = schedule_H(sigma, mdp.gamma)
    return report, sigma, H, schedule_t0(H, report.K2, T)


def check_critic_recovery(scale):
    mdp, policy = path_fixture()
    model = build_dense_model(mdp, policy)
    T = scale['critic_T']
    _, sigma, H, t0 = _critic_schedule(mdp, policy, 2, T, model)
    config = SACConfig(2, 0, T, 1, H, t0, 0.0, mdp.gamma)
    tol = scale['critic_tol'] * mdp.r_bar / (1.0 - mdp.gamma)
    errors = []
    for seed in range(scale['critic_seeds']):
        result = run_inner_loop(mdp, policy, config, make_rng(seed, 'critic'))
        errors.append(max(critic_sup_error(mdp, policy, result.tables, model)))
    hits = sum(e <= tol for e in errors)
    needed = math.ceil(0.9 * len(errors))
    return _result('sac', 'critic recovers exact Q at full coverage', hits >= needed, max(errors), tol,
                   f"{hits}/{len(errors)} seeds within tolerance")


def check_truncated_critic_bound(scale):
    mdp, policy = path_fixture()
    model = build_dense_model(mdp, policy)
    T = scale['critic_T']
    kappa = 1
    report, sigma, H, t0 = _critic_schedule(mdp, policy, kappa, T, model)
    mu_hat = max(estimate_mu(spread_samples(mdp.graph, mdp.link_dist, 0, i, kappa, scale['spread_samples'],
                                            mdp.gamma), mdp.gamma).mu for i in range(mdp.n))
    config = SACConfig(kappa, 0, T, 1, H, t0, 0.0, mdp.gamma)
    bound = critic_bound(config, report.K1, report.K2, sigma, mdp.r_bar, mdp.graph.max_neighborhood(kappa), mu_hat)
    worst = 0.0
    for seed in range(scale['critic_seeds']):
        result = run_inner_loop(mdp, policy, config, make_rng(seed, 'critic'))
        worst = max(worst, max(critic_sup_error(mdp, policy, result.tables, model)))
    return _result('sac', 'truncated critic error within envelope', worst <= bound, worst, bound)


def check_training_improves(scale):
    mdp, _ = path_fixture()
    config = SACConfig(2, 0, 300, scale['sac_M'], 20.0, 80.0, 0.5, mdp.gamma, seed=0, oracle=True)
    with warnings.catch_warnings():
        warnings.simplefilter('ignore', ScheduleWarning)
        record = run(mdp, config)
    exact = [m.return_exact for m in record.metrics]
    window = scale['sac_window']
    lead, trail = float(np.mean(exact[:window])), float(np.mean(exact[-window:]))
    return _result('sac', 'exact objective improves over training', trail > lead, trail - lead, 0.0,
                   f"leading mean {lead:.4f}, trailing mean {trail:.4f}")


# ======================================================================
# envs
# ======================================================================

def check_wireless_trivial(scale):
    mdp = isolated_user()
    value = exact_objective(mdp, aloha_policy(mdp, 0.0))
    expected = 1.0 / (1.0 - mdp.gamma)
    return _result('envs', 'isolated user always delivers', abs(value - expected) <= 1e-9, value, expected)


def check_wireless_collision(scale):
    mdp = build_wireless(WirelessConfig(d=1, q=1.0, ap_probs=(1.0,), user_access=((0,), (0,))), None)
    rng = make_rng(0, 'collision')
    s = np.ones(2, dtype=np.int64)
    total = 0.0
    for _ in range(100):
        s, r = step(mdp, s, np.ones(2, dtype=np.int64), sample_links(mdp.link_dist, mdp.graph, rng), rng)
        total += r.sum()
    return _result('envs', 'shared access point always collides', total == 0.0, total, 0.0)


def check_wireless_chain(scale):
    mdp = isolated_user(q=0.5, d=2)
    policy = aloha_policy(mdp, 0.0)
    exact = exact_objective(mdp, policy)
    mean, se = evaluate_policy(mdp, policy, scale['wireless_rollouts'], make_rng(0, 'wireless-eval'))
    tol = 4.0 * se + mdp.gamma ** evaluation_horizon(mdp.gamma) / (1.0 - mdp.gamma)
    return _result('envs', 'wireless rollouts match the dense chain', abs(mean - exact) <= tol,
                   abs(mean - exact), tol)


def check_sis_escape(scale):
    dyn = SISDynamics([2.0] * 3, [0.1] * 3, [0.3] * 3, [0.8] * 3)
    sources = (0, 1, 2)
    s_src, a_src = (1, 1, 0), (1, 0, 1)
    expected = (1.0 - 0.8) * (1.0 - 0.2)
    rng = make_rng(0, 'sis-escape')
    draws = scale['rollouts']
    stays = sum(dyn.sample_transition(2, sources, s_src, a_src, rng.random(1)) == 0 for _ in range(draws))
    freq = stays / draws
    se = math.sqrt(expected * (1 - expected) / draws)
    return _result('envs', 'SIS escape probability', abs(freq - expected) <= 4 * se, freq, expected)


# ======================================================================
# harness
# ======================================================================

def check_determinism(scale):
    from harness import ExperimentConfig, run_experiment

    spec = {'kind': 'synthetic', 'graph': {'kind': 'path', 'n': 3}}
    sac = {'kappa': 1, 'beta': 0, 'T': 50, 'M': 3, 'H': 5.0, 't0': 20.0, 'eta': 0.1}
    with tempfile.TemporaryDirectory() as first, tempfile.TemporaryDirectory() as second:
        for out in (first, second):
            config = ExperimentConfig(environment=spec, sac=sac, seed=7, replicates=2, workers=1, output_dir=out,
                                      baseline=None, oracle=True)
            with warnings.catch_warnings():
                warnings.simplefilter('ignore', ScheduleWarning)
                run_experiment(config, quiet=True)
        result = RunVerifier().verify_no_changes(first, second)
    return _result('harness', 'identical seeds give identical artifacts', result['match'],
                   len(result.get('violations', [])), 0)


def check_baseline_sweep(scale):
    from harness import sweep_baseline

    mdp = isolated_user()
    best = sweep_baseline(mdp, [0.0, 0.5, 1.0], 0, seed=0, method='exact')
    expected = 1.0 / (1.0 - mdp.gamma)
    passed = best['p_empty'] == 0.0 and abs(best['mean'] - expected) <= 1e-9
    return _result('harness', 'baseline sweep selects always-send', passed, best['p_empty'], 0.0)


def check_wireless_sac_beats_aloha(scale):
    """
    5x5 wireless grid with kappa = 1: the trailing mean evaluated return of
    SAC against the best point of an 11-point p_empty ALOHA sweep, per seed
    """
    from harness import ExperimentConfig, run_experiment

    seeds = scale['aloha_seeds']
    if not seeds:
        return _result('harness', 'SAC beats tuned ALOHA', True, status='skipped below full scale')
    M, T, window = scale['aloha_M'], scale['aloha_T'], scale['aloha_window']
    environment = {'kind': 'wireless', 'h': 5, 'w': 5, 'c': 1, 'd': 2, 'q': 0.5, 'gamma': 0.7}
    sac = {'kappa': 1, 'beta': 0, 'T': T, 'M': M, 'H': 10.0, 't0': 40.0, 'eta': 0.5}
    baseline = {'grid': ALOHA_GRID, 'rollouts': scale['aloha_rollouts']}
    notes = f"desk-scale validation: M reduced to {M} outer iterations of T={T}"

    wins = 0
    details = []
    for seed in range(seeds):
        with tempfile.TemporaryDirectory() as out:
            config = ExperimentConfig(environment=environment, sac=sac, seed=seed, replicates=1, workers=1,
                                      output_dir=out, baseline=baseline, eval_rollouts=scale['aloha_eval'],
                                      notes=notes)
            with warnings.catch_warnings():
                warnings.simplefilter('ignore', ScheduleWarning)
                summary = run_experiment(config, quiet=True)
            with open(Path(out) / 'metrics.csv', 'r', encoding='utf-8', newline='') as f:
                returns = [float(row['return_estimate']) for row in csv.DictReader(f)]
        trailing = float(np.mean(returns[-window:]))
        best = summary['baseline']
        wins += trailing > best['mean']
        details.append({'seed': seed, 'sac_trailing': trailing, 'aloha_best': best['mean'],
                        'aloha_p_empty': best['p_empty'], 'manifest_M': summary['manifest']['config']['sac']['M'],
                        'manifest_notes': summary['manifest']['notes']})
        logger.info("seed %d: SAC %.4f vs ALOHA %.4f (p_empty=%.1f)", seed, trailing, best['mean'], best['p_empty'])

    result = _result('harness', 'SAC beats tuned ALOHA', wins >= scale['aloha_wins'], wins, scale['aloha_wins'],
                     f"SAC ahead on {wins}/{seeds} seeds (M={M})")
    result['details'] = details
    return result


# ======================================================================
# Registry
# ======================================================================

@dataclass(frozen=True)
class Check:
    suite: str
    name: str
    func: Callable[[dict], dict]


class ValidationSuite:
    """
    Registry of named checks grouped by module
    Every check returns a result dict with measured value and threshold
    """

    def __init__(self):
        self.checks: List[Check] = [
            Check('netmdp', 'kernel normalization', check_fixture_kernels),
            Check('netmdp', 'dense Q vs rollouts', check_dense_q_against_rollouts),
            Check('netmdp', 'SIS link symmetry', check_sis_link_symmetry),
            Check('decay', 'static-local sandwich', check_static_decay),
            Check('decay', 'geometric bound', check_geometric_decay),
            Check('stochapprox', 'contraction properties', check_contraction_properties),
            Check('stochapprox', 'fixed point', check_fixed_point),
            Check('tdq', 'value iteration methods', check_value_iteration_methods),
            Check('tdq', 'Q target identity', check_q_target_identity),
            Check('tdq', 'Q-learning convergence', check_q_learning_convergence),
            Check('tdq', 'TD bound', check_td_bound),
            Check('sac', 'critic replay', check_critic_replay),
            Check('sac', 'log gradient', check_log_gradient),
            Check('sac', 'exact gradient', check_exact_gradient),
            Check('sac', 'actor gradient mean', check_actor_gradient_mean),
            Check('sac', 'critic recovery', check_critic_recovery),
            Check('sac', 'truncated critic bound', check_truncated_critic_bound),
            Check('sac', 'training improves', check_training_improves),
            Check('envs', 'wireless isolated user', check_wireless_trivial),
            Check('envs', 'wireless collision', check_wireless_collision),
            Check('envs', 'wireless chain', check_wireless_chain),
            Check('envs', 'SIS escape', check_sis_escape),
            Check('harness', 'determinism', check_determinism),
            Check('harness', 'baseline sweep', check_baseline_sweep),
            Check('harness', 'SAC beats tuned ALOHA', check_wireless_sac_beats_aloha),
        ]
        self.test_results: List[dict] = []

    def register(self, suite, name, func):
        self.checks.append(Check(suite, name, func))

    def select(self, selector: Optional[str] = None) -> List[Check]:
        """Empty selector means the full suite"""
        if not selector:
            return list(self.checks)
        chosen = [c for c in self.checks if c.suite == selector]
        if not chosen:
            raise ConfigError(f"unknown suite '{selector}'; choose from {', '.join(SUITES)}")
        return chosen

    def run(self, selector: Optional[str] = None, scale='quick', quiet=False) -> Dict:
        """
        Run the selected checks

        Returns:
            dict: Report with pass/fail counts and per-check results
        """
        if scale not in SCALES:
            raise ConfigError(f"unknown scale '{scale}'; choose quick or full")
        checks = self.select(selector)
        params = SCALES[scale]

        if not quiet:
            print("\n" + "=" * 70)
            print(f"VALIDATION SUITE ({selector or 'all'}, {scale})")
            print("=" * 70)

        passed = failed = 0
        self.test_results = []
        for check in checks:
            try:
                result = check.func(params)
            except Exception as exc:
                logger.exception("check %s/%s raised", check.suite, check.name)
                result = _result(check.suite, check.name, False, status=f"{type(exc).__name__}: {exc}")
            self.test_results.append(result)
            if result['passed']:
                passed += 1
                marker = '✓'
            else:
                failed += 1
                marker = '✗'
            if not quiet:
                print(f"  {marker} [{check.suite}] {check.name}: {result['status']}")

        if not quiet:
            print("\n" + "-" * 70)
            print(f"Results: {passed}/{len(checks)} checks passed")
            print("=" * 70 + "\n")

        return {
            'selector': selector or 'all',
            'scale': scale,
            'all_passed': failed == 0,
            'passed_count': passed,
            'failed_count': failed,
            'total_tests': len(checks),
            'test_results': self.test_results,
        }

#!/usr/bin/env python3
"""
TD(0) and Q-Learning with Aggregation
Tabular models, exact solvers, aggregated runs and the aggregated-MDP oracles
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
import yaml
from scipy import linalg

from errors import ConfigError, OracleCapError, PreconditionError, ScheduleWarning
from netmdp import chain_stationary
from stochapprox import AggregationMap, ContractionOperator, schedule_H

logger = logging.getLogger(__name__)

VALUE_ORACLE_CAP = 4096
ROW_TOL = 1e-12


def _check_rows(P, what):
    if np.any(P < 0) or np.any(np.abs(P.sum(axis=-1) - 1.0) > ROW_TOL):
        raise PreconditionError(f"{what} rows must be probability distributions")


@dataclass(frozen=True, eq=False)
class MarkovRewardProcess:
    """
    Chain P with mean rewards r(i, i') and uniform reward noise

    noise defaults to 0.1 * max|r|; r_bar bounds every sampled reward.
    """
    P: np.ndarray
    r: np.ndarray
    gamma: float
    noise: Optional[float] = None

    def __post_init__(self):
        P = np.asarray(self.P, dtype=float)
        r = np.asarray(self.r, dtype=float)
        if P.ndim != 2 or P.shape[0] != P.shape[1] or r.shape != P.shape:
            raise PreconditionError("P and r must be matching square matrices")
        _check_rows(P, "transition")
        if not 0.0 <= self.gamma < 1.0:
            raise PreconditionError(f"gamma must lie in [0,1), got {self.gamma}")
        object.__setattr__(self, 'P', P)
        object.__setattr__(self, 'r', r)
        if self.noise is None:
            object.__setattr__(self, 'noise', 0.1 * float(np.abs(r).max()))

    @property
    def n(self):
        return self.P.shape[0]

    @property
    def r_bar(self) -> float:
        return max(float(np.abs(self.r).max()) + self.noise, 1e-12)

    def mean_reward(self) -> np.ndarray:
        return (self.P * self.r).sum(axis=1)

    def bellman_operator(self) -> ContractionOperator:
        mean = self.mean_reward()
        return ContractionOperator(lambda V: mean + self.gamma * self.P @ V, self.gamma,
                                   float(np.abs(mean).max()), name='Bellman policy operator')

    def stationary(self) -> np.ndarray:
        return chain_stationary(self.P)


@dataclass(frozen=True, eq=False)
class TabularMDP:
    """
    Finite MDP with kernel P[s, a, s'], mean rewards R[s, a] and a
    strictly positive behavior policy
    """
    P: np.ndarray
    R: np.ndarray
    gamma: float
    behavior: Optional[np.ndarray] = None
    noise: Optional[float] = None

    def __post_init__(self):
        P = np.asarray(self.P, dtype=float)
        R = np.asarray(self.R, dtype=float)
        if P.ndim != 3 or P.shape[0] != P.shape[2] or R.shape != P.shape[:2]:
            raise PreconditionError("need P of shape (S, A, S) and R of shape (S, A)")
        _check_rows(P, "kernel")
        if not 0.0 <= self.gamma < 1.0:
            raise PreconditionError(f"gamma must lie in [0,1), got {self.gamma}")
        behavior = self.behavior
        if behavior is None:
            behavior = np.full(R.shape, 1.0 / R.shape[1])
        behavior = np.asarray(behavior, dtype=float)
        if behavior.shape != R.shape or np.any(behavior <= 0):
            raise PreconditionError("behavior policy must be strictly positive with shape (S, A)")
        _check_rows(behavior, "behavior policy")
        object.__setattr__(self, 'P', P)
        object.__setattr__(self, 'R', R)
        object.__setattr__(self, 'behavior', behavior)
        if self.noise is None:
            object.__setattr__(self, 'noise', 0.1 * float(np.abs(R).max()))

    @property
    def num_states(self):
        return self.P.shape[0]

    @property
    def num_actions(self):
        return self.P.shape[1]

    @property
    def r_bar(self) -> float:
        return max(float(np.abs(self.R).max()) + self.noise, 1e-12)

    def optimality_operator(self) -> ContractionOperator:
        """Bellman optimality operator on flattened Q over S x A"""
        S, A = self.num_states, self.num_actions

        def apply(q):
            best = q.reshape(S, A).max(axis=1)
            return (self.R + self.gamma * self.P @ best).ravel()

        return ContractionOperator(apply, self.gamma, float(np.abs(self.R).max()),
                                   name='Bellman optimality operator')

    def behavior_chain(self) -> np.ndarray:
        """(s,a) chain under the behavior policy"""
        S, A = self.num_states, self.num_actions
        return (self.P[:, :, :, None] * self.behavior[None, None, :, :]).reshape(S * A, S * A)

    def behavior_stationary(self) -> np.ndarray:
        """Stationary distribution over S x A, shape (S, A)"""
        return chain_stationary(self.behavior_chain()).reshape(self.num_states, self.num_actions)


@dataclass(frozen=True)
class AbstractionQuality:
    zeta: float
    epsilon_qstar: float
    midpoints: np.ndarray = field(repr=False, default=None)


@dataclass
class AggregatedRun:
    """Result of one aggregated TD / Q-learning trajectory"""
    theta: np.ndarray
    max_abs: float
    bound: float
    steps: int
    checkpoints: List[Tuple[int, float]] = field(default_factory=list)


# ======================================================================
# Exact solvers
# ======================================================================

def _iteration_cap_warning(max_iter, tol):
    message = f"value iteration stopped at max_iter={max_iter} before reaching tol={tol}"
    warnings.warn(message, ScheduleWarning, stacklevel=3)
    logger.warning(message)


def value_iteration(model, tol=1e-10, method='solve', max_iter=100_000) -> np.ndarray:
    """
    Exact V* of an MRP or Q* (shape (S, A)) of a TabularMDP

    MRPs are solved densely (method='solve') or by repeated sweeps
    (method='iterate'); MDPs always use Bellman-optimality iteration.
    """
    if method not in ('solve', 'iterate'):
        raise PreconditionError(f"unknown value iteration method '{method}'")
    if isinstance(model, MarkovRewardProcess):
        if model.n > VALUE_ORACLE_CAP:
            raise OracleCapError(f"MRP with {model.n} states exceeds the oracle cap {VALUE_ORACLE_CAP}")
        mean = model.mean_reward()
        if method == 'solve':
            values = linalg.solve(np.eye(model.n) - model.gamma * model.P, mean)
            residual = np.abs(mean + model.gamma * model.P @ values - values).max()
            if residual > tol:
                logger.warning("dense MRP solve residual %.3g above tol %.3g", residual, tol)
            return values
        values = np.zeros(model.n)
        for _ in range(max_iter):
            nxt = mean + model.gamma * model.P @ values
            if np.abs(nxt - values).max() <= tol:
                return nxt
            values = nxt
        _iteration_cap_warning(max_iter, tol)
        return values

    if model.num_states * model.num_actions > VALUE_ORACLE_CAP:
        raise OracleCapError(f"MDP with {model.num_states}x{model.num_actions} pairs exceeds the oracle cap")
    q = np.zeros((model.num_states, model.num_actions))
    for _ in range(max_iter):
        nxt = model.R + model.gamma * model.P @ q.max(axis=1)
        if np.abs(nxt - q).max() <= tol:
            return nxt
        q = nxt
    _iteration_cap_warning(max_iter, tol)
    return q


def abstraction_quality(values, h: AggregationMap) -> AbstractionQuality:
    """Within-class spread zeta and best sup-norm class fit epsilon"""
    values = np.asarray(values, dtype=float).ravel()
    if values.shape != (h.n,):
        raise PreconditionError(f"values have {values.size} entries, aggregation map covers {h.n}")
    lo = np.full(h.m, np.inf)
    hi = np.full(h.m, -np.inf)
    np.minimum.at(lo, h.h, values)
    np.maximum.at(hi, h.h, values)
    spread = float((hi - lo).max())
    return AbstractionQuality(spread, spread / 2.0, (lo + hi) / 2.0)


def state_action_map(psi1: AggregationMap, psi2: AggregationMap) -> AggregationMap:
    """h(s, a) = (psi1(s), psi2(a)) over flattened S x A"""
    h = (psi1.h[:, None] * psi2.m + psi2.h[None, :]).ravel()
    return AggregationMap(h, psi1.m * psi2.m)


def _class_weights(mdp, psi1, psi2, d):
    hz = state_action_map(psi1, psi2)
    d = np.asarray(d, dtype=float).ravel()
    if d.shape != (hz.n,):
        raise PreconditionError("d must cover every (s, a) pair")
    mass = hz.class_mass(d)
    if np.any(mass <= 0):
        raise PreconditionError(f"abstract pairs {np.flatnonzero(mass <= 0).tolist()} have zero mass under d")
    return hz, d / mass[hz.h]


def build_aggregated_mdp(mdp: TabularMDP, psi1: AggregationMap, psi2: AggregationMap, d) -> TabularMDP:
    """M_psi over (psi1(S), psi2(A)) with d-conditional class weights"""
    hz, weights = _class_weights(mdp, psi1, psi2, d)
    Z = hz.n
    R_psi = np.bincount(hz.h, weights=weights * mdp.R.ravel(), minlength=hz.m)
    to_abstract = (mdp.P @ psi1.phi_matrix()).reshape(Z, psi1.m)
    P_psi = np.zeros((hz.m, psi1.m))
    np.add.at(P_psi, hz.h, weights[:, None] * to_abstract)
    P_psi /= P_psi.sum(axis=1, keepdims=True)
    return TabularMDP(P_psi.reshape(psi1.m, psi2.m, psi1.m), R_psi.reshape(psi1.m, psi2.m),
                      mdp.gamma, noise=mdp.noise)


def build_lifted_mdp(mdp: TabularMDP, psi1: AggregationMap, psi2: AggregationMap, d) -> TabularMDP:
    """
    M_psi' on the ground spaces: class-averaged rewards and kernels

    Its optimal Q equals Phi Q*_{M_psi}.
    """
    hz, weights = _class_weights(mdp, psi1, psi2, d)
    S, A = mdp.num_states, mdp.num_actions
    R_class = np.bincount(hz.h, weights=weights * mdp.R.ravel(), minlength=hz.m)
    P_class = np.zeros((hz.m, S))
    np.add.at(P_class, hz.h, weights[:, None] * mdp.P.reshape(S * A, S))
    P_class /= P_class.sum(axis=1, keepdims=True)
    return TabularMDP(P_class[hz.h].reshape(S, A, S), R_class[hz.h].reshape(S, A), mdp.gamma, noise=mdp.noise)


# ======================================================================
# Aggregated runs
# ======================================================================

def _check_schedule(H, t0, gamma, sigma_prime):
    if sigma_prime is None:
        logger.info("sigma' unknown; step-size precondition H >= 2/(sigma'(1-gamma)) unverified")
    elif H < schedule_H(sigma_prime, gamma):
        message = f"H={H} below 2/(sigma'(1-gamma))={schedule_H(sigma_prime, gamma):.4g}; iterate bounds no longer guaranteed"
        warnings.warn(message, ScheduleWarning, stacklevel=3)
        logger.warning(message)
    if H > t0:
        message = f"first step size H/t0={H / t0:.3g} exceeds 1"
        warnings.warn(message, ScheduleWarning, stacklevel=3)
        logger.warning(message)


def aggregated_sigma(h: AggregationMap, d) -> float:
    """sigma' = smallest class mass under d"""
    return float(h.class_mass(d).min())


def td0_aggregated(mrp: MarkovRewardProcess, h: AggregationMap, H, t0, T, rng,
                   sigma_prime=None, start=None, log_every=None) -> AggregatedRun:
    """TD(0) with one value per abstract state along a single trajectory"""
    _check_schedule(H, t0, mrp.gamma, sigma_prime)
    theta = np.zeros(h.m)
    cum = np.cumsum(mrp.P, axis=1)
    state = int(rng.integers(mrp.n)) if start is None else int(start)
    draws = rng.random((T, 2))
    bound = mrp.r_bar / (1.0 - mrp.gamma)
    run = AggregatedRun(theta, 0.0, bound, T)

    for t in range(T):
        nxt = min(int(np.searchsorted(cum[state], draws[t, 0], side='right')), mrp.n - 1)
        reward = mrp.r[state, nxt] + mrp.noise * (2.0 * draws[t, 1] - 1.0)
        j = h.h[state]
        theta[j] += H / (t + t0) * (reward + mrp.gamma * theta[h.h[nxt]] - theta[j])
        run.max_abs = max(run.max_abs, abs(theta[j]))
        if log_every and (t + 1) % log_every == 0:
            run.checkpoints.append((t + 1, float(np.abs(theta).max())))
        state = nxt

    if run.max_abs > bound + 1e-9:
        logger.warning("TD iterate reached %.4g, above r_bar/(1-gamma)=%.4g", run.max_abs, bound)
    return run


def q_learning_aggregated(mdp: TabularMDP, psi1: AggregationMap, psi2: AggregationMap, H, t0, T, rng,
                          sigma_prime=None, start=None, log_every=None) -> AggregatedRun:
    """Q-learning with state and action aggregation; theta has shape (m1, m2)"""
    _check_schedule(H, t0, mdp.gamma, sigma_prime)
    S = mdp.num_states
    theta = np.zeros((psi1.m, psi2.m))
    cum_kernel = np.cumsum(mdp.P, axis=2)
    cum_behavior = np.cumsum(mdp.behavior, axis=1)
    state = int(rng.integers(S)) if start is None else int(start)
    draws = rng.random((T, 3))
    bound = mdp.r_bar / (1.0 - mdp.gamma)
    run = AggregatedRun(theta, 0.0, bound, T)

    for t in range(T):
        action = min(int(np.searchsorted(cum_behavior[state], draws[t, 0], side='right')), mdp.num_actions - 1)
        nxt = min(int(np.searchsorted(cum_kernel[state, action], draws[t, 1], side='right')), S - 1)
        reward = mdp.R[state, action] + mdp.noise * (2.0 * draws[t, 2] - 1.0)
        x, y = psi1.h[state], psi2.h[action]
        # max over ground actions a' of theta[psi1(s'), psi2(a')]
        target = reward + mdp.gamma * theta[psi1.h[nxt], psi2.h].max()
        theta[x, y] += H / (t + t0) * (target - theta[x, y])
        run.max_abs = max(run.max_abs, abs(theta[x, y]))
        if log_every and (t + 1) % log_every == 0:
            run.checkpoints.append((t + 1, float(np.abs(theta).max())))
        state = nxt

    if run.max_abs > bound + 1e-9:
        logger.warning("Q iterate reached %.4g, above r_bar/(1-gamma)=%.4g", run.max_abs, bound)
    return run


# ======================================================================
# Fixtures
# ======================================================================

def random_mrp(n, gamma, rng, noise=None) -> MarkovRewardProcess:
    """Ergodic MRP with Dirichlet rows and rewards in [0, 1]"""
    P = rng.dirichlet(np.ones(n), size=n)
    return MarkovRewardProcess(P, rng.random((n, n)), gamma, noise)


def random_tabular_mdp(num_states, num_actions, gamma, rng, noise=None) -> TabularMDP:
    P = rng.dirichlet(np.ones(num_states), size=(num_states, num_actions))
    return TabularMDP(P, rng.random((num_states, num_actions)), gamma, noise=noise)


def _read_fixture(path):
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = yaml.safe_load(f)
    except yaml.YAMLError as exc:
        mark = getattr(exc, 'problem_mark', None)
        raise ConfigError(f"unreadable fixture: {exc}", line=mark.line + 1 if mark else None, path=path) from exc
    if not isinstance(data, dict):
        raise ConfigError("fixture must be a mapping", path=path)
    return data


def load_mrp(path) -> MarkovRewardProcess:
    """Fixture keys: gamma, P (n x n), r (n x n), optional noise"""
    data = _read_fixture(path)
    try:
        return MarkovRewardProcess(np.array(data['P']), np.array(data['r']), float(data['gamma']), data.get('noise'))
    except KeyError as exc:
        raise ConfigError(f"missing key {exc}", path=path) from None
    except PreconditionError as exc:
        raise ConfigError(str(exc), path=path) from None


def load_tabular_mdp(path) -> TabularMDP:
    """Fixture keys: gamma, P (S x A x S), R (S x A), optional behavior and noise"""
    data = _read_fixture(path)
    try:
        behavior = data.get('behavior')
        return TabularMDP(np.array(data['P']), np.array(data['R']), float(data['gamma']),
                          None if behavior is None else np.array(behavior), data.get('noise'))
    except KeyError as exc:
        raise ConfigError(f"missing key {exc}", path=path) from None
    except PreconditionError as exc:
        raise ConfigError(str(exc), path=path) from None

#!/usr/bin/env python3
"""
Scalable Actor Critic
Truncated per-agent critics trained by TD along shared trajectories and
localized policy-gradient actor updates
"""

from __future__ import annotations

import json
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from scipy import linalg

from errors import ConfigError, PreconditionError, ProvenanceError, ScheduleWarning
from netmdp import (DenseModel, LocalizedPolicy, NetworkedMDP, StationaryPolicy, _mixed_radix_strides,
                    build_dense_model, exact_objective, make_rng, neighborhood_class_ids, sample_links,
                    solve_q, step)
from stochapprox import td_bound_constants

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 'netsac-policy'
CHECKPOINT_VERSION = 1
INDEX_LIMIT = 2 ** 62


@dataclass(frozen=True)
class SACConfig:
    """
    Algorithm parameters

    sigma_prime, K2 and W_prime are optional convergence-bound constants; when known
    the step-size preconditions are checked and breaches emit warnings.
    """
    kappa: int
    beta: int
    T: int
    M: int
    H: float
    t0: float
    eta: float
    gamma: float
    seed: int = 0
    warm_start: bool = False
    eval_rollouts: int = 0
    oracle: bool = False
    sigma_prime: Optional[float] = None
    K2: Optional[float] = None
    W_prime: Optional[float] = None

    def __post_init__(self):
        if self.kappa < 0 or self.beta < 0:
            raise PreconditionError("kappa and beta must be nonnegative")
        if self.T < 0 or self.M < 0:
            raise PreconditionError("T and M must be nonnegative")
        if self.H <= 0 or self.t0 <= 0:
            raise PreconditionError("H and t0 must be positive")
        if self.eta < 0:
            raise PreconditionError("eta must be nonnegative")
        if not 0.0 <= self.gamma < 1.0:
            raise PreconditionError(f"gamma must lie in [0,1), got {self.gamma}")

    def alpha(self, t) -> float:
        return self.H / (t + self.t0)

    def eta_m(self, m) -> float:
        return self.eta / math.sqrt(m + 1)

    def precondition_messages(self) -> List[str]:
        messages = []
        if self.sigma_prime is not None:
            needed = 2.0 / ((1.0 - self.gamma) * self.sigma_prime)
            if self.H < needed:
                messages.append(f"H={self.H} below 2/((1-gamma) sigma')={needed:.4g}")
        if self.K2 is not None and self.T > 1:
            needed = max(4.0 * self.H, 2.0 * self.K2 * math.log(self.T))
            if not math.isclose(self.t0, needed, rel_tol=1e-9):
                messages.append(f"t0={self.t0} differs from max(4H, 2 K2 ln T)={needed:.4g}")
        if self.W_prime is not None and self.eta > 1.0 / (4.0 * self.W_prime):
            messages.append(f"eta={self.eta} above 1/(4W')={1.0 / (4.0 * self.W_prime):.4g}")
        if self.H > self.t0:
            messages.append(f"first critic step H/t0={self.H / self.t0:.3g} exceeds 1")
        return messages

    def warn_preconditions(self):
        for message in self.precondition_messages():
            warnings.warn(message, ScheduleWarning, stacklevel=3)
            logger.warning(message)
        unknown = [name for name in ('sigma_prime', 'K2') if getattr(self, name) is None]
        if unknown:
            logger.info("convergence-bound preconditions unverified: %s unknown", ", ".join(unknown))

    def as_dict(self) -> dict:
        return asdict(self)


class TruncatedQTable:
    """
    Critic table of agent i over (s_{N_i^kappa}, a_{N_i^kappa})

    Index order is lexicographic over sorted agent ids, states before
    actions. Entries are stored on first write and read as 0 before.
    """

    def __init__(self, agent, kappa, neighborhood, state_dims, action_dims, gamma, run_key=None):
        self.agent = int(agent)
        self.kappa = int(kappa)
        self.neighborhood = np.array(sorted(neighborhood), dtype=np.int64)
        self.state_dims = tuple(int(k) for k in state_dims)
        self.action_dims = tuple(int(k) for k in action_dims)
        self.gamma = float(gamma)
        self.run_key = run_key
        self.size = math.prod(self.state_dims) * math.prod(self.action_dims)
        if self.size >= INDEX_LIMIT:
            raise PreconditionError(f"agent {agent} critic index space ({self.size}) exceeds 2^62")
        strides = _mixed_radix_strides(self.state_dims + self.action_dims)
        k = len(self.state_dims)
        self._s_strides = strides[:k]
        self._a_strides = strides[k:]
        self.values: Dict[int, float] = {}

    @classmethod
    def for_agent(cls, mdp: NetworkedMDP, i, kappa, run_key=None):
        nb = mdp.graph.khop(i, kappa)
        return cls(i, kappa, nb, [mdp.state_sizes[j] for j in nb], [mdp.action_sizes[j] for j in nb],
                   mdp.gamma, run_key)

    @classmethod
    def from_dense(cls, mdp: NetworkedMDP, i, kappa, q_global):
        """Exact Q_i as a table; needs N_i^kappa to cover every agent"""
        table = cls.for_agent(mdp, i, kappa)
        if len(table.neighborhood) != mdp.n:
            raise PreconditionError(f"agent {i} neighborhood at kappa={kappa} does not cover the network")
        table.values = {z: float(v) for z, v in enumerate(np.asarray(q_global).ravel())}
        return table

    def index(self, s, a) -> int:
        """Table index of the global pair; reads only coordinates in N_i^kappa"""
        nb = self.neighborhood
        return int(np.dot(s[nb], self._s_strides) + np.dot(a[nb], self._a_strides))

    def local_index(self, s_nb, a_nb) -> int:
        return int(np.dot(np.asarray(s_nb, dtype=np.int64), self._s_strides)
                   + np.dot(np.asarray(a_nb, dtype=np.int64), self._a_strides))

    def __getitem__(self, idx) -> float:
        return self.values.get(idx, 0.0)

    def __setitem__(self, idx, value):
        self.values[idx] = value

    def reset(self):
        self.values = {}

    def max_abs(self) -> float:
        return max((abs(v) for v in self.values.values()), default=0.0)

    def dense(self) -> np.ndarray:
        if self.size > 10 ** 7:
            raise PreconditionError(f"table of size {self.size} too large to materialize")
        out = np.zeros(self.size)
        for idx, value in self.values.items():
            out[idx] = value
        return out


def critic_update(table: TruncatedQTable, prev, r_i, curr, alpha_t) -> TruncatedQTable:
    """Q[prev] <- (1 - alpha) Q[prev] + alpha (r_i + gamma Q[curr])"""
    if isinstance(prev, tuple):
        prev = table.local_index(*prev)
    if isinstance(curr, tuple):
        curr = table.local_index(*curr)
    table[prev] = (1.0 - alpha_t) * table[prev] + alpha_t * (r_i + table.gamma * table[curr])
    return table


@dataclass
class Trajectory:
    """States, actions and rewards for t = 0..T"""
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    run_key: object = None

    def __len__(self):
        return self.states.shape[0]

    def discounted_return(self, gamma) -> float:
        """sum_t gamma^t mean_i r_i(t)"""
        discounts = gamma ** np.arange(len(self))
        return float(discounts @ self.rewards.mean(axis=1))


@dataclass
class InnerLoopResult:
    tables: List[TruncatedQTable]
    trajectory: Trajectory


def run_inner_loop(mdp: NetworkedMDP, policy: StationaryPolicy, config: SACConfig, rng,
                   tables: Optional[List[TruncatedQTable]] = None, run_key=None) -> InnerLoopResult:
    """One shared trajectory of length T+1 with a critic update per agent per step after t=0"""
    n, T = mdp.n, config.T
    if tables is None:
        tables = [TruncatedQTable.for_agent(mdp, i, config.kappa, run_key) for i in range(n)]
    else:
        for table in tables:
            table.run_key = run_key

    states = np.empty((T + 1, n), dtype=np.int64)
    actions = np.empty((T + 1, n), dtype=np.int64)
    rewards = np.empty((T + 1, n))
    s = mdp.sample_initial_state(rng)
    prev_idx: Optional[List[int]] = None

    for t in range(T + 1):
        a = policy.sample_joint(s, rng.random(n))
        links = sample_links(mdp.link_dist, mdp.graph, rng)
        s_next, r = step(mdp, s, a, links, rng)
        states[t], actions[t], rewards[t] = s, a, r
        idx = [table.index(s, a) for table in tables]
        if prev_idx is not None:
            alpha = config.alpha(t - 1)
            for i, table in enumerate(tables):
                critic_update(table, prev_idx[i], rewards[t - 1, i], idx[i], alpha)
        prev_idx = idx
        s = s_next

    return InnerLoopResult(tables, Trajectory(states, actions, rewards, run_key))


def table_values(trajectory: Trajectory, tables: Sequence[TruncatedQTable]) -> np.ndarray:
    """(T+1, n) matrix of Q_j^T(s_{N_j}(t), a_{N_j}(t))"""
    out = np.empty((len(trajectory), len(tables)))
    for j, table in enumerate(tables):
        for t in range(len(trajectory)):
            out[t, j] = table[table.index(trajectory.states[t], trajectory.actions[t])]
    return out


def _check_provenance(trajectory, tables):
    for table in tables:
        if table.run_key is not None and table.run_key != trajectory.run_key:
            raise ProvenanceError(f"table of agent {table.agent} comes from inner loop {table.run_key!r}, "
                                  f"trajectory from {trajectory.run_key!r}")


def actor_gradient(trajectory: Trajectory, tables: Sequence[TruncatedQTable], policy: LocalizedPolicy,
                   config: SACConfig, i, q_path: Optional[np.ndarray] = None) -> np.ndarray:
    """
    g_i = sum_t gamma^t (1/n) sum_{j in N_i^kappa} Q_j^T(t) grad log zeta_i(a_i(t) | s_{N_i^beta}(t))
    """
    _check_provenance(trajectory, tables)
    n = len(tables)
    if q_path is None:
        q_path = table_values(trajectory, tables)
    length = len(trajectory)
    weights = config.gamma ** np.arange(length) * q_path[:, tables[i].neighborhood].sum(axis=1) / n

    rows = np.array([policy.state_index(i, trajectory.states[t]) for t in range(length)], dtype=np.int64)
    acts = trajectory.actions[:, i]
    contrib = -weights[:, None] * policy.probability_table(i)[rows]
    contrib[np.arange(length), acts] += weights
    grad = np.zeros_like(policy.theta[i])
    np.add.at(grad, rows, contrib)
    return grad


def actor_step(policy: LocalizedPolicy, gradients, m, eta) -> LocalizedPolicy:
    """theta_i += eta / sqrt(m + 1) * g_i for every agent"""
    size = eta / math.sqrt(m + 1)
    for i, grad in enumerate(gradients):
        policy.ascend(i, size * grad)
    return policy


# ======================================================================
# Oracle helpers
# ======================================================================

def exact_policy_gradient(mdp: NetworkedMDP, policy: LocalizedPolicy, i, kappa=None,
                          model: Optional[DenseModel] = None) -> np.ndarray:
    """
    Expectation of the actor estimator with exact Q and T -> infinity

    With kappa=None (or kappa >= diameter) this is the gradient of
    exact_objective with respect to theta_i.
    """
    model = model or build_dense_model(mdp, policy)
    S, A = model.num_states, model.num_actions
    agents = range(mdp.n) if kappa is None else mdp.graph.khop(i, kappa)
    q_bar = sum(solve_q(model, model.rewards[:, j]).ravel() for j in agents) / mdp.n

    start = (model.initial[:, None] * model.policy).ravel()
    occupancy = linalg.solve((np.eye(S * A) - mdp.gamma * model.pair_chain()).T, start)

    grad = np.zeros_like(policy.theta[i])
    probs = policy.probability_table(i)
    weights = (occupancy * q_bar).reshape(S, A)
    for si, s in enumerate(model.states):
        row = policy.state_index(i, s)
        for ai, a in enumerate(model.actions):
            grad[row] -= weights[si, ai] * probs[row]
            grad[row, a[i]] += weights[si, ai]
    return grad


def critic_sup_error(mdp: NetworkedMDP, policy: StationaryPolicy, tables: Sequence[TruncatedQTable],
                     model: Optional[DenseModel] = None) -> List[float]:
    """sup_(s,a) |Q_i(s,a) - Q_i^hat(s_{N_i}, a_{N_i})| per agent"""
    model = model or build_dense_model(mdp, policy)
    errors = []
    for i, table in enumerate(tables):
        q = solve_q(model, model.rewards[:, i]).ravel()
        ids, _ = neighborhood_class_ids(mdp, model, i, table.kappa)
        approx = np.array([table[int(k)] for k in ids])
        errors.append(float(np.abs(q - approx).max()))
    return errors


def critic_bound(config: SACConfig, K1, K2, sigma_prime, r_bar, f_kappa, mu_hat=0.0, delta=0.1) -> float:
    """C_a / sqrt(T + t0) + C_a' / (T + t0) + r_bar * mu_hat / (1 - gamma)"""
    constants = td_bound_constants(config.H, config.t0, config.T, K1, K2, sigma_prime, config.gamma,
                                   r_bar, f_kappa, delta)
    return constants.envelope(config.T, config.t0) + r_bar * mu_hat / (1.0 - config.gamma)


def evaluation_horizon(gamma) -> int:
    if gamma <= 0:
        return 1
    return math.ceil(math.log(1e-3) / math.log(gamma))


def evaluate_policy(mdp: NetworkedMDP, policy: StationaryPolicy, rollouts, rng, horizon=None):
    """Mean and standard error of sum_t gamma^t mean_i r_i(t) over fresh rollouts"""
    horizon = horizon or evaluation_horizon(mdp.gamma)
    returns = np.empty(rollouts)
    for k in range(rollouts):
        s = mdp.sample_initial_state(rng)
        total, discount = 0.0, 1.0
        for _ in range(horizon):
            a = policy.sample_joint(s, rng.random(mdp.n))
            links = sample_links(mdp.link_dist, mdp.graph, rng)
            s, r = step(mdp, s, a, links, rng)
            total += discount * r.mean()
            discount *= mdp.gamma
        returns[k] = total
    stderr = returns.std(ddof=1) / math.sqrt(rollouts) if rollouts > 1 else 0.0
    return float(returns.mean()), float(stderr)


# ======================================================================
# Training
# ======================================================================

@dataclass
class IterationMetrics:
    m: int
    t_total: int
    return_estimate: float
    grad_norm: float
    wall_ms: float
    return_exact: Optional[float] = None
    max_critic_residual: Optional[float] = None


@dataclass
class TrainingRecord:
    policy: LocalizedPolicy
    config: SACConfig
    metrics: List[IterationMetrics] = field(default_factory=list)


def run(mdp: NetworkedMDP, config: SACConfig, callbacks: Sequence[Callable] = (),
        policy: Optional[LocalizedPolicy] = None) -> TrainingRecord:
    """
    M outer iterations of critic inner loop, actor gradients and actor step

    Callbacks receive (metrics, policy) after each iteration.
    """
    if not math.isclose(config.gamma, mdp.gamma):
        raise PreconditionError(f"config gamma {config.gamma} differs from the MDP's {mdp.gamma}")
    policy = policy or LocalizedPolicy.for_mdp(mdp, config.beta)
    record = TrainingRecord(policy, config)
    if config.M == 0:
        return record
    config.warn_preconditions()

    tables = None
    t_total = 0
    for m in range(config.M):
        started = time.perf_counter()
        run_key = (config.seed, m)
        result = run_inner_loop(mdp, policy, config, make_rng(config.seed, 'inner', m),
                                tables if config.warm_start else None, run_key)
        q_path = table_values(result.trajectory, result.tables)
        gradients = [actor_gradient(result.trajectory, result.tables, policy, config, i, q_path)
                     for i in range(mdp.n)]
        t_total += config.T + 1

        if config.eval_rollouts > 0:
            estimate, _ = evaluate_policy(mdp, policy, config.eval_rollouts, make_rng(config.seed, 'eval', m))
        else:
            estimate = result.trajectory.discounted_return(mdp.gamma)

        exact = residual = None
        if config.oracle:
            model = build_dense_model(mdp, policy)
            exact = exact_objective(mdp, policy, model)
            residual = max(critic_sup_error(mdp, policy, result.tables, model))

        grad_norm = math.sqrt(sum(float((g ** 2).sum()) for g in gradients))
        actor_step(policy, gradients, m, config.eta)
        tables = result.tables

        metrics = IterationMetrics(m, t_total, estimate, grad_norm,
                                   (time.perf_counter() - started) * 1000.0, exact, residual)
        record.metrics.append(metrics)
        logger.debug("iteration %d: return %.4f, |g| %.4g", m, estimate, grad_norm)
        for callback in callbacks:
            callback(metrics, policy)
    return record


# ======================================================================
# Checkpoints
# ======================================================================

def save_checkpoint(policy: LocalizedPolicy, path, extra: Optional[dict] = None):
    """Versioned JSON text layout of the policy tables"""
    document = {
        'format': CHECKPOINT_FORMAT,
        'version': CHECKPOINT_VERSION,
        'beta': policy.beta,
        'agents': [
            {
                'agent': i,
                'neighborhood': policy.neighborhoods[i].tolist(),
                'local_dims': list(policy.local_dims[i]),
                'theta': policy.theta[i].tolist(),
            }
            for i in range(policy.n)
        ],
    }
    if extra:
        document['extra'] = extra
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(document, f, indent=2)
    return path


def load_checkpoint(path, mdp: NetworkedMDP) -> LocalizedPolicy:
    try:
        with open(path, 'r', encoding='utf-8') as f:
            document = json.load(f)
    except OSError as exc:
        raise ConfigError(f"cannot read checkpoint: {exc.strerror}", path=path) from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed checkpoint: {exc.msg}", line=exc.lineno, path=path) from None
    if not isinstance(document, dict) or document.get('format') != CHECKPOINT_FORMAT \
            or document.get('version') != CHECKPOINT_VERSION:
        raise ConfigError(f"not a version {CHECKPOINT_VERSION} {CHECKPOINT_FORMAT} checkpoint", path=path)
    try:
        theta = [np.array(entry['theta'], dtype=float) for entry in document['agents']]
        beta = document['beta']
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"checkpoint is missing {exc}", path=path) from None
    return LocalizedPolicy.for_mdp(mdp, beta, theta)

#!/usr/bin/env python3
"""
Networked MDP Engine
Agent graphs, stochastic active link sets, factorized transitions,
localized softmax policies and exact small-instance oracles
"""

from __future__ import annotations

import itertools
import logging
import math
import zlib
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import networkx as nx
import numpy as np
from scipy import linalg
from scipy.special import softmax

from errors import (AgentIndexError, ChainError, KernelError, OracleCapError,
                    PreconditionError)

logger = logging.getLogger(__name__)

DEFAULT_ORACLE_CAP = 100_000
TRANSITION_ENTRY_CAP = 2 ** 26
DENSE_CHAIN_CAP = 2048
LINK_SUPPORT_LIMIT = 2 ** 16
DEFAULT_LINK_SAMPLES = 4096
KERNEL_TOL = 1e-12

STATIC_LOCAL = 'static-local'
GEOMETRIC = 'geometric'
CUSTOM_TABLE = 'custom-table'


# ======================================================================
# Seeding
# ======================================================================

def _stream_key(key):
    if isinstance(key, str):
        return zlib.crc32(key.encode('utf-8'))
    return int(key)


def make_rng(seed, *keys):
    """
    Counter-based generator for one named stream

    Args:
        seed: Experiment seed (nonnegative int)
        keys: Stream path, e.g. ('inner', m) or ('spread', k)

    Returns:
        numpy Generator backed by Philox
    """
    seq = np.random.SeedSequence(int(seed), spawn_key=tuple(_stream_key(k) for k in keys))
    return np.random.Generator(np.random.Philox(seq))


def derive_seed(seed, *keys):
    """63-bit child seed for the stream named by keys"""
    seq = np.random.SeedSequence(int(seed), spawn_key=tuple(_stream_key(k) for k in keys))
    return int(seq.generate_state(1, dtype=np.uint64)[0]) & (2 ** 63 - 1)


def _inverse_cdf(probs, u):
    k = int(np.searchsorted(np.cumsum(probs), u, side='right'))
    return min(k, len(probs) - 1)


def _mixed_radix_strides(dims):
    strides = np.ones(len(dims), dtype=np.int64)
    for k in range(len(dims) - 2, -1, -1):
        strides[k] = strides[k + 1] * dims[k + 1]
    return strides


# ======================================================================
# Graph
# ======================================================================

class AgentGraph:
    """
    Undirected agent graph with all-pairs hop distances

    Unreachable pairs have distance inf.
    """

    def __init__(self, n: int, edges: Sequence[Tuple[int, int]] = ()):
        if n < 1:
            raise PreconditionError(f"agent graph needs at least one agent, got n={n}")
        graph = nx.Graph()
        graph.add_nodes_from(range(n))
        for u, v in edges:
            if not (0 <= u < n and 0 <= v < n):
                raise AgentIndexError(f"edge ({u}, {v}) outside 0..{n - 1}")
            if u != v:
                graph.add_edge(int(u), int(v))

        self.n = n
        self.edges = frozenset(tuple(sorted(e)) for e in graph.edges())
        distance = np.full((n, n), np.inf)
        for src, lengths in nx.all_pairs_shortest_path_length(graph):
            for dst, hops in lengths.items():
                distance[src, dst] = hops
        distance.setflags(write=False)
        self.distance = distance
        self._graph = graph

    @classmethod
    def from_networkx(cls, graph):
        nodes = sorted(graph.nodes())
        index = {node: k for k, node in enumerate(nodes)}
        return cls(len(nodes), [(index[u], index[v]) for u, v in graph.edges()])

    @classmethod
    def grid(cls, h: int, w: int):
        """h x w grid with 4-connectivity; node (r, c) becomes r*w + c"""
        return cls.from_networkx(nx.grid_2d_graph(h, w))

    @classmethod
    def path(cls, n: int):
        return cls(n, [(k, k + 1) for k in range(n - 1)])

    def to_networkx(self):
        return self._graph.copy()

    def _check_agent(self, i):
        if not 0 <= i < self.n:
            raise AgentIndexError(f"agent {i} outside 0..{self.n - 1}")

    def khop(self, i: int, kappa) -> Tuple[int, ...]:
        """N_i^kappa, sorted"""
        self._check_agent(i)
        if kappa < 0:
            raise PreconditionError(f"radius must be nonnegative, got {kappa}")
        return tuple(int(j) for j in np.flatnonzero(self.distance[i] <= kappa))

    def exterior(self, i: int, kappa) -> Tuple[int, ...]:
        """N_{-i}^kappa: agents farther than kappa hops (including unreachable ones)"""
        self._check_agent(i)
        return tuple(int(j) for j in np.flatnonzero(self.distance[i] > kappa))

    def boundary(self, i: int, kappa) -> Tuple[int, ...]:
        self._check_agent(i)
        return tuple(int(j) for j in np.flatnonzero(self.distance[i] == kappa))

    def eccentricity(self, i: int) -> float:
        self._check_agent(i)
        return float(self.distance[i].max())

    @property
    def diameter(self) -> float:
        return float(self.distance.max())

    def max_neighborhood(self, kappa) -> int:
        """f(kappa) = max_i |N_i^kappa|"""
        return int((self.distance <= kappa).sum(axis=1).max())


# ======================================================================
# Active link sets
# ======================================================================

@dataclass(frozen=True, eq=False)
class ActiveLinkSetPair:
    """
    One (L^s, L^r) sample

    ls[j, i] is True when agent j influences agent i's transition;
    lr[j, i] likewise for i's reward. Self-loops are mandatory.
    """
    ls: np.ndarray
    lr: np.ndarray

    def __post_init__(self):
        for name in ('ls', 'lr'):
            links = getattr(self, name)
            if links.ndim != 2 or links.shape[0] != links.shape[1]:
                raise PreconditionError(f"{name} must be a square boolean matrix")
            if not np.all(np.diagonal(links)):
                missing = np.flatnonzero(~np.diagonal(links)).tolist()
                raise PreconditionError(f"{name} is missing self-loops for agents {missing}")

    @classmethod
    def from_pairs(cls, n, ls_pairs=(), lr_pairs=()):
        ls = np.eye(n, dtype=bool)
        lr = np.eye(n, dtype=bool)
        for j, i in ls_pairs:
            ls[j, i] = True
        for j, i in lr_pairs:
            lr[j, i] = True
        return cls(ls, lr)

    @property
    def n(self):
        return self.ls.shape[0]

    def state_sources(self, i) -> np.ndarray:
        """N_i(L^s)"""
        return np.flatnonzero(self.ls[:, i])

    def reward_sources(self, i) -> np.ndarray:
        """N_i(L^r)"""
        return np.flatnonzero(self.lr[:, i])

    def pairs(self):
        ls = {(int(j), int(i)) for j, i in zip(*np.nonzero(self.ls))}
        lr = {(int(j), int(i)) for j, i in zip(*np.nonzero(self.lr))}
        return ls, lr

    def __eq__(self, other):
        if not isinstance(other, ActiveLinkSetPair):
            return NotImplemented
        return np.array_equal(self.ls, other.ls) and np.array_equal(self.lr, other.lr)

    __hash__ = None


def _bernoulli_links(probs, symmetric, rng):
    links = rng.random(probs.shape) < probs
    if symmetric:
        upper = np.triu(links, 1)
        links = upper | upper.T
    np.fill_diagonal(links, True)
    return links


@dataclass(frozen=True, eq=False)
class LinkDistribution:
    """
    Distribution D of active link set pairs

    static-local: deterministic links within alpha1 (state) / alpha2 (reward) hops.
    geometric: each pair (j, i), j != i, independently with probability
        min(1, c * lam ** d(i, j)); L^s and L^r drawn independently.
        `symmetric` mirrors each sampled unordered pair; reward_links='self'
        keeps L^r at self-loops only.
    custom-table: explicit (probability, pair) entries sampled jointly.
    """
    kind: str
    alpha1: int = 0
    alpha2: int = 0
    c: float = 1.0
    lam: float = 0.0
    symmetric: bool = False
    reward_links: str = 'sampled'
    table: Tuple[Tuple[float, ActiveLinkSetPair], ...] = ()

    def __post_init__(self):
        if self.kind == STATIC_LOCAL:
            if self.alpha1 < 0 or self.alpha2 < 0:
                raise PreconditionError("static-local radii must be nonnegative")
        elif self.kind == GEOMETRIC:
            if self.c < 0 or not 0.0 <= self.lam <= 1.0:
                raise PreconditionError(f"geometric links need c >= 0 and lam in [0,1], got c={self.c}, lam={self.lam}")
            if self.reward_links not in ('sampled', 'self'):
                raise PreconditionError(f"unknown reward_links mode '{self.reward_links}'")
        elif self.kind == CUSTOM_TABLE:
            if not self.table:
                raise PreconditionError("custom-table link distribution needs at least one entry")
            probs = np.array([p for p, _ in self.table])
            if np.any(probs < 0) or abs(probs.sum() - 1.0) > KERNEL_TOL:
                raise PreconditionError(f"custom-table probabilities must be nonnegative and sum to 1, got {probs.sum()!r}")
        else:
            raise PreconditionError(f"unknown link distribution kind '{self.kind}'")

    @classmethod
    def static_local(cls, alpha1, alpha2):
        return cls(STATIC_LOCAL, alpha1=int(alpha1), alpha2=int(alpha2))

    @classmethod
    def geometric(cls, c, lam, symmetric=False, reward_links='sampled'):
        return cls(GEOMETRIC, c=float(c), lam=float(lam), symmetric=symmetric, reward_links=reward_links)

    @classmethod
    def custom(cls, entries):
        return cls(CUSTOM_TABLE, table=tuple((float(p), pair) for p, pair in entries))

    def describe(self) -> dict:
        if self.kind == STATIC_LOCAL:
            return {'kind': self.kind, 'alpha1': self.alpha1, 'alpha2': self.alpha2}
        if self.kind == GEOMETRIC:
            return {'kind': self.kind, 'c': self.c, 'lambda': self.lam,
                    'symmetric': self.symmetric, 'reward_links': self.reward_links}
        return {'kind': self.kind, 'entries': len(self.table)}

    def inclusion_probabilities(self, graph: AgentGraph):
        """Marginal inclusion probability matrices (P[j, i] for link j -> i)"""
        n = graph.n
        dist = graph.distance
        if self.kind == STATIC_LOCAL:
            return (dist <= self.alpha1).astype(float), (dist <= self.alpha2).astype(float)
        if self.kind == GEOMETRIC:
            with np.errstate(over='ignore', invalid='ignore'):
                ps = np.minimum(1.0, self.c * np.power(self.lam, dist))
            ps[np.isinf(dist)] = 0.0
            np.fill_diagonal(ps, 1.0)
            pr = ps.copy() if self.reward_links == 'sampled' else np.eye(n)
            return ps, pr
        ps = sum(p * pair.ls.astype(float) for p, pair in self.table)
        pr = sum(p * pair.lr.astype(float) for p, pair in self.table)
        return ps, pr

    def support(self, graph: AgentGraph, limit=LINK_SUPPORT_LIMIT):
        """
        Enumerate (probability, pair) over the support

        Returns None when the support exceeds `limit` sets.
        """
        if self.kind == STATIC_LOCAL:
            return [(1.0, sample_links(self, graph, None))]
        if self.kind == CUSTOM_TABLE:
            return [(p, pair) for p, pair in self.table if p > 0]

        ps, pr = self.inclusion_probabilities(graph)
        ls_free = _uncertain_entries(ps, self.symmetric)
        lr_free = _uncertain_entries(pr, self.symmetric) if self.reward_links == 'sampled' else []
        k = len(ls_free) + len(lr_free)
        if k >= 63 or 2 ** k > limit:
            return None

        base_ls = ps >= 1.0
        base_lr = pr >= 1.0
        entries = []
        for bits in itertools.product((False, True), repeat=k):
            ls, lr = base_ls.copy(), base_lr.copy()
            prob = 1.0
            for (j, i), on in zip(ls_free, bits[:len(ls_free)]):
                prob *= ps[j, i] if on else 1.0 - ps[j, i]
                ls[j, i] = on
                if self.symmetric:
                    ls[i, j] = on
            for (j, i), on in zip(lr_free, bits[len(ls_free):]):
                prob *= pr[j, i] if on else 1.0 - pr[j, i]
                lr[j, i] = on
                if self.symmetric:
                    lr[i, j] = on
            if prob > 0:
                entries.append((prob, ActiveLinkSetPair(ls, lr)))
        return entries


def _uncertain_entries(probs, symmetric):
    n = probs.shape[0]
    entries = []
    for j in range(n):
        for i in range(n):
            if j == i or (symmetric and j > i):
                continue
            if 0.0 < probs[j, i] < 1.0:
                entries.append((j, i))
    return entries


def sample_links(dist: LinkDistribution, graph: AgentGraph, rng) -> ActiveLinkSetPair:
    """Draw one active link set pair from D"""
    if dist.kind == STATIC_LOCAL:
        return ActiveLinkSetPair(graph.distance <= dist.alpha1, graph.distance <= dist.alpha2)
    if dist.kind == GEOMETRIC:
        ps, pr = dist.inclusion_probabilities(graph)
        ls = _bernoulli_links(ps, dist.symmetric, rng)
        if dist.reward_links == 'self':
            lr = np.eye(graph.n, dtype=bool)
        else:
            lr = _bernoulli_links(pr, dist.symmetric, rng)
        return ActiveLinkSetPair(ls, lr)
    probs = np.array([p for p, _ in dist.table])
    k = _inverse_cdf(probs, rng.random())
    return dist.table[k][1]


# ======================================================================
# Local dynamics
# ======================================================================

@dataclass(frozen=True)
class KernelRow:
    """One transition-kernel row that is not a probability distribution"""
    agent: int
    sources: Tuple[int, ...]
    s_src: Tuple[int, ...]
    a_src: Tuple[int, ...]
    total: float

    def __str__(self):
        return (f"agent {self.agent} row (sources={self.sources}, s={self.s_src}, "
                f"a={self.a_src}) sums to {self.total:.12g}")


class LocalDynamics(ABC):
    """
    Per-agent transition kernels and rewards

    Every method receives only the coordinates of the agents listed in
    `sources` (N_i(L) for the active link set, increasing agent order).
    `u` is agent i's row of per-step uniforms.
    """
    uniforms_per_agent = 1

    @abstractmethod
    def transition_probs(self, i, sources, s_src, a_src) -> np.ndarray:
        """Distribution of s_i' given the source coordinates"""

    @abstractmethod
    def expected_reward(self, i, sources, s_src, a_src) -> float:
        """Mean of r_i given the reward-source coordinates"""

    def sample_transition(self, i, sources, s_src, a_src, u) -> int:
        return _inverse_cdf(self.transition_probs(i, sources, s_src, a_src), u[0])

    def sample_reward(self, i, sources, s_src, a_src, u) -> float:
        return self.expected_reward(i, sources, s_src, a_src)

    def describe(self) -> dict:
        return {'kind': type(self).__name__}


class TableDynamics(LocalDynamics):
    """
    Explicit conditional-probability tables

    kernels[i][(sources, s_src, a_src)] -> probabilities over S_i
    rewards[i][(sources, s_src, a_src)] -> reward value
    """

    def __init__(self, kernels: Mapping, rewards: Mapping, validate=True):
        self.kernels = {int(i): {_table_key(k): np.asarray(v, dtype=float) for k, v in rows.items()}
                        for i, rows in kernels.items()}
        self.rewards = {int(i): {_table_key(k): float(v) for k, v in rows.items()}
                        for i, rows in rewards.items()}
        if validate:
            bad = self.normalization_errors()
            if bad:
                raise KernelError(f"malformed kernel: {bad[0]} ({len(bad)} row(s) affected)")

    def normalization_errors(self) -> List[KernelRow]:
        bad = []
        for i, rows in sorted(self.kernels.items()):
            for (sources, s_src, a_src), probs in rows.items():
                total = float(probs.sum())
                if abs(total - 1.0) > KERNEL_TOL or np.any(probs < 0):
                    bad.append(KernelRow(i, sources, s_src, a_src, total))
        return bad

    def _lookup(self, table, kind, i, sources, s_src, a_src):
        key = (tuple(sources), tuple(s_src), tuple(a_src))
        try:
            return table[i][key]
        except KeyError:
            raise KernelError(f"no {kind} entry for agent {i} at (sources={key[0]}, s={key[1]}, a={key[2]})") from None

    def transition_probs(self, i, sources, s_src, a_src):
        return self._lookup(self.kernels, 'kernel', i, sources, s_src, a_src)

    def expected_reward(self, i, sources, s_src, a_src):
        return self._lookup(self.rewards, 'reward', i, sources, s_src, a_src)


def _table_key(key):
    sources, s_src, a_src = key
    return (tuple(int(x) for x in sources), tuple(int(x) for x in s_src), tuple(int(x) for x in a_src))


class FunctionDynamics(LocalDynamics):
    """Procedural kernels given as plain callables"""

    def __init__(self, kernel_fn: Callable, reward_fn: Callable):
        self.kernel_fn = kernel_fn
        self.reward_fn = reward_fn

    def transition_probs(self, i, sources, s_src, a_src):
        return np.asarray(self.kernel_fn(i, sources, s_src, a_src), dtype=float)

    def expected_reward(self, i, sources, s_src, a_src):
        return float(self.reward_fn(i, sources, s_src, a_src))


# ======================================================================
# Networked MDP
# ======================================================================

class NetworkedMDP:
    """
    Networked MDP with factorized transitions

    Immutable after construction. States and actions are int arrays of
    length n; local values are small integers.
    """

    def __init__(self, graph: AgentGraph, state_sizes: Sequence[int], action_sizes: Sequence[int],
                 link_dist: LinkDistribution, dynamics: LocalDynamics, gamma: float, r_bar: float,
                 init_dist: Optional[Sequence[Sequence[float]]] = None, name='networked-mdp',
                 metadata: Optional[dict] = None):
        n = graph.n
        if len(state_sizes) != n or len(action_sizes) != n:
            raise PreconditionError(f"need {n} local space sizes, got {len(state_sizes)} states / {len(action_sizes)} actions")
        if min(state_sizes) < 1 or min(action_sizes) < 1:
            raise PreconditionError("local spaces must be nonempty")
        if not 0.0 <= gamma < 1.0:
            raise PreconditionError(f"gamma must lie in [0,1), got {gamma}")
        if r_bar <= 0:
            raise PreconditionError(f"reward bound must be positive, got {r_bar}")

        self.graph = graph
        self.state_sizes = tuple(int(k) for k in state_sizes)
        self.action_sizes = tuple(int(k) for k in action_sizes)
        self.link_dist = link_dist
        self.dynamics = dynamics
        self.gamma = float(gamma)
        self.r_bar = float(r_bar)
        self.name = name
        self.metadata = dict(metadata or {})

        if init_dist is None:
            init_dist = [np.full(k, 1.0 / k) for k in self.state_sizes]
        self.init_dist = []
        for i, probs in enumerate(init_dist):
            probs = np.asarray(probs, dtype=float)
            if probs.shape != (self.state_sizes[i],) or np.any(probs < 0) or abs(probs.sum() - 1.0) > KERNEL_TOL:
                raise PreconditionError(f"initial distribution of agent {i} is not a distribution over {self.state_sizes[i]} states")
            self.init_dist.append(probs)

    @property
    def n(self):
        return self.graph.n

    @property
    def num_states(self) -> int:
        return math.prod(self.state_sizes)

    @property
    def num_actions(self) -> int:
        return math.prod(self.action_sizes)

    def sample_initial_state(self, rng) -> np.ndarray:
        u = rng.random(self.n)
        return np.array([_inverse_cdf(self.init_dist[i], u[i]) for i in range(self.n)], dtype=np.int64)

    def initial_distribution(self) -> np.ndarray:
        """pi_0 over global states (oracle sizes only)"""
        dist = np.ones(1)
        for probs in self.init_dist:
            dist = np.multiply.outer(dist, probs).ravel()
        return dist

    def check_state(self, s):
        s = np.asarray(s)
        if s.shape != (self.n,) or np.any(s < 0) or np.any(s >= np.array(self.state_sizes)):
            raise PreconditionError(f"invalid global state {s.tolist()}")

    def check_action(self, a):
        a = np.asarray(a)
        if a.shape != (self.n,) or np.any(a < 0) or np.any(a >= np.array(self.action_sizes)):
            raise PreconditionError(f"invalid global action {a.tolist()}")

    def describe(self) -> dict:
        return {
            'name': self.name,
            'n': self.n,
            'state_sizes': list(self.state_sizes),
            'action_sizes': list(self.action_sizes),
            'gamma': self.gamma,
            'r_bar': self.r_bar,
            'links': self.link_dist.describe(),
            'dynamics': self.dynamics.describe(),
            'metadata': self.metadata,
        }


def step(mdp: NetworkedMDP, s, a, links: ActiveLinkSetPair, rng):
    """
    One environment transition

    Returns:
        (next global state, per-agent rewards)
    """
    n = mdp.n
    dyn = mdp.dynamics
    s = np.asarray(s, dtype=np.int64)
    a = np.asarray(a, dtype=np.int64)
    u = rng.random((n, dyn.uniforms_per_agent))
    s_next = np.empty(n, dtype=np.int64)
    rewards = np.empty(n)
    for i in range(n):
        src = links.state_sources(i)
        s_next[i] = dyn.sample_transition(i, tuple(src.tolist()), tuple(s[src].tolist()),
                                          tuple(a[src].tolist()), u[i])
        rsrc = links.reward_sources(i)
        rewards[i] = dyn.sample_reward(i, tuple(rsrc.tolist()), tuple(s[rsrc].tolist()),
                                       tuple(a[rsrc].tolist()), u[i])
    if np.any(np.abs(rewards) > mdp.r_bar + 1e-9):
        worst = int(np.argmax(np.abs(rewards)))
        raise KernelError(f"agent {worst} reward {rewards[worst]!r} exceeds declared bound {mdp.r_bar}")
    return s_next, rewards


# ======================================================================
# Policies
# ======================================================================

class StationaryPolicy(ABC):
    """Per-agent action distributions conditioned on s_{N_i^beta}"""

    def __init__(self, graph: AgentGraph, beta: int, state_sizes, action_sizes):
        self.beta = int(beta)
        self.n = graph.n
        self.action_sizes = tuple(int(k) for k in action_sizes)
        self.neighborhoods = [np.array(graph.khop(i, beta), dtype=np.int64) for i in range(graph.n)]
        self.local_dims = [tuple(int(state_sizes[j]) for j in nb) for nb in self.neighborhoods]
        self._strides = [_mixed_radix_strides(dims) for dims in self.local_dims]
        self.num_local_states = [math.prod(dims) for dims in self.local_dims]

    def local_index(self, i, s_nb) -> int:
        """Row index of the neighborhood state tuple s_{N_i^beta}"""
        return int(np.dot(np.asarray(s_nb, dtype=np.int64), self._strides[i]))

    def state_index(self, i, s) -> int:
        return int(np.dot(s[self.neighborhoods[i]], self._strides[i]))

    @abstractmethod
    def probability_table(self, i) -> np.ndarray:
        """(num_local_states_i, |A_i|) action probabilities"""

    def action_probs(self, i, s_nb) -> np.ndarray:
        return self.probability_table(i)[self.local_index(i, s_nb)]

    def sample_action(self, i, s_nb, rng) -> int:
        """Local action of agent i drawn from its row for neighborhood state s_nb"""
        return _inverse_cdf(self.action_probs(i, s_nb), rng.random())

    def sample_joint(self, s, u) -> np.ndarray:
        """Joint action for global state s; agent i consumes u[i]"""
        a = np.empty(self.n, dtype=np.int64)
        for i in range(self.n):
            a[i] = _inverse_cdf(self.probability_table(i)[self.state_index(i, s)], u[i])
        return a

    def joint_action_probs(self, s, num_actions) -> np.ndarray:
        joint = np.ones(1)
        for i in range(self.n):
            joint = np.multiply.outer(joint, self.probability_table(i)[self.state_index(i, s)]).ravel()
        if joint.size != num_actions:
            raise PreconditionError("policy action spaces do not match the MDP")
        return joint


class LocalizedPolicy(StationaryPolicy):
    """
    Tabular softmax policy

    theta[i] has shape (num_local_states_i, |A_i|); zeros give the
    uniform policy.
    """

    # sup over rows of ||onehot(a) - softmax||_2
    gradient_bound = math.sqrt(2.0)

    def __init__(self, graph, beta, state_sizes, action_sizes, theta=None):
        super().__init__(graph, beta, state_sizes, action_sizes)
        if theta is None:
            theta = [np.zeros((self.num_local_states[i], self.action_sizes[i])) for i in range(self.n)]
        self.theta = []
        self._probs = []
        for i, values in enumerate(theta):
            values = np.array(values, dtype=float)
            expected = (self.num_local_states[i], self.action_sizes[i])
            if values.shape != expected:
                raise PreconditionError(f"theta[{i}] has shape {values.shape}, expected {expected}")
            self.theta.append(values)
            self._probs.append(softmax(values, axis=1))

    @classmethod
    def for_mdp(cls, mdp: NetworkedMDP, beta, theta=None):
        return cls(mdp.graph, beta, mdp.state_sizes, mdp.action_sizes, theta)

    def probability_table(self, i):
        return self._probs[i]

    def set_theta(self, i, values):
        values = np.array(values, dtype=float)
        if values.shape != self.theta[i].shape:
            raise PreconditionError(f"theta[{i}] shape mismatch: {values.shape} vs {self.theta[i].shape}")
        self.theta[i] = values
        self._probs[i] = softmax(values, axis=1)

    def ascend(self, i, delta):
        self.set_theta(i, self.theta[i] + delta)

    def copy(self):
        clone = object.__new__(LocalizedPolicy)
        clone.__dict__.update(self.__dict__)
        clone.theta = [t.copy() for t in self.theta]
        clone._probs = [p.copy() for p in self._probs]
        return clone


class TablePolicy(StationaryPolicy):
    """Fixed localized policy given by explicit probability tables"""

    def __init__(self, graph, beta, state_sizes, action_sizes, tables):
        super().__init__(graph, beta, state_sizes, action_sizes)
        self.tables = []
        for i, table in enumerate(tables):
            table = np.asarray(table, dtype=float)
            expected = (self.num_local_states[i], self.action_sizes[i])
            if table.shape != expected:
                raise PreconditionError(f"policy table {i} has shape {table.shape}, expected {expected}")
            if np.any(table < 0) or np.any(np.abs(table.sum(axis=1) - 1.0) > 1e-12):
                raise PreconditionError(f"policy table {i} rows are not distributions")
            self.tables.append(table)

    def probability_table(self, i):
        return self.tables[i]


def sample_action(policy: StationaryPolicy, i, s_nb, rng) -> int:
    return _inverse_cdf(policy.action_probs(i, s_nb), rng.random())


def log_policy_gradient(policy: LocalizedPolicy, i, s_nb, a_i) -> np.ndarray:
    """Gradient of log zeta_i(a_i | s_nb) with respect to theta_i"""
    row = policy.local_index(i, s_nb)
    grad = np.zeros_like(policy.theta[i])
    grad[row] = -policy.probability_table(i)[row]
    grad[row, a_i] += 1.0
    return grad


# ======================================================================
# Dense oracles
# ======================================================================

@dataclass
class DenseModel:
    """
    Link-marginalized global model for oracle computations

    Row z = s * |A| + a of `transition` is P(. | s, a); `rewards[z, i]` is
    the expected reward of agent i; `policy[s, a]` is the joint policy.
    """
    states: np.ndarray
    actions: np.ndarray
    transition: np.ndarray
    rewards: np.ndarray
    policy: np.ndarray
    initial: np.ndarray
    gamma: float
    tolerance: float = 0.0

    @property
    def num_states(self):
        return self.states.shape[0]

    @property
    def num_actions(self):
        return self.actions.shape[0]

    def state_chain(self) -> np.ndarray:
        S, A = self.num_states, self.num_actions
        return np.einsum('sa,sat->st', self.policy, self.transition.reshape(S, A, S))

    def pair_chain(self) -> np.ndarray:
        S, A = self.num_states, self.num_actions
        return (self.transition[:, :, None] * self.policy[None, :, :]).reshape(S * A, S * A)


def _enumerate(sizes):
    return np.array(list(itertools.product(*[range(k) for k in sizes])), dtype=np.int64).reshape(-1, len(sizes))


def _link_support(mdp, link_samples, seed):
    support = mdp.link_dist.support(mdp.graph, LINK_SUPPORT_LIMIT)
    if support is not None:
        return support, 0.0
    rng = make_rng(seed, 'oracle-links')
    weight = 1.0 / link_samples
    support = [(weight, sample_links(mdp.link_dist, mdp.graph, rng)) for _ in range(link_samples)]
    tolerance = 3.0 * mdp.r_bar / ((1.0 - mdp.gamma) * math.sqrt(link_samples))
    logger.warning("link support exceeds %d sets; marginalizing over %d sampled link sets (tolerance %.3g)",
                   LINK_SUPPORT_LIMIT, link_samples, tolerance)
    return support, tolerance


def build_dense_model(mdp: NetworkedMDP, policy: StationaryPolicy, cap=DEFAULT_ORACLE_CAP,
                      link_samples=DEFAULT_LINK_SAMPLES, seed=0) -> DenseModel:
    """Enumerate S x A and marginalize kernels and rewards over the link distribution"""
    S, A, n = mdp.num_states, mdp.num_actions, mdp.n
    if S * A > cap or S * A * S > TRANSITION_ENTRY_CAP:
        raise OracleCapError(f"|S|x|A| = {S}x{A} exceeds the oracle cap of {cap} entries")

    states = _enumerate(mdp.state_sizes)
    actions = _enumerate(mdp.action_sizes)
    support, tolerance = _link_support(mdp, link_samples, seed)
    dyn = mdp.dynamics

    transition = np.zeros((S * A, S))
    rewards = np.zeros((S * A, n))
    kernel_cache: Dict[tuple, np.ndarray] = {}
    reward_cache: Dict[tuple, float] = {}

    for weight, links in support:
        src = [links.state_sources(i) for i in range(n)]
        rsrc = [links.reward_sources(i) for i in range(n)]
        for si, s in enumerate(states):
            for ai, a in enumerate(actions):
                z = si * A + ai
                joint = np.ones(1)
                for i in range(n):
                    key = (i, tuple(src[i].tolist()), tuple(s[src[i]].tolist()), tuple(a[src[i]].tolist()))
                    probs = kernel_cache.get(key)
                    if probs is None:
                        probs = dyn.transition_probs(*key)
                        kernel_cache[key] = probs
                    joint = np.multiply.outer(joint, probs).ravel()

                    rkey = (i, tuple(rsrc[i].tolist()), tuple(s[rsrc[i]].tolist()), tuple(a[rsrc[i]].tolist()))
                    value = reward_cache.get(rkey)
                    if value is None:
                        value = dyn.expected_reward(*rkey)
                        reward_cache[rkey] = value
                    rewards[z, i] += weight * value
                transition[z] += weight * joint

    joint_policy = np.array([policy.joint_action_probs(s, A) for s in states])
    logger.debug("dense model built: |S|=%d |A|=%d, %d link sets", S, A, len(support))
    return DenseModel(states, actions, transition, rewards, joint_policy,
                      mdp.initial_distribution(), mdp.gamma, tolerance)


def solve_q(model: DenseModel, reward: np.ndarray) -> np.ndarray:
    """Solve Q = r + gamma P^theta Q through the |S|-dimensional value system"""
    S, A = model.num_states, model.num_actions
    r_sa = reward.reshape(S, A)
    values = linalg.solve(np.eye(S) - model.gamma * model.state_chain(), (model.policy * r_sa).sum(axis=1))
    return (reward + model.gamma * model.transition @ values).reshape(S, A)


def bellman_residual(model: DenseModel, reward: np.ndarray, q: np.ndarray) -> float:
    values = (model.policy * q).sum(axis=1)
    target = reward + model.gamma * model.transition @ values
    return float(np.abs(q.ravel() - target).max())


def exact_local_q(mdp: NetworkedMDP, policy: StationaryPolicy, i, model: Optional[DenseModel] = None,
                  cap=DEFAULT_ORACLE_CAP) -> np.ndarray:
    """
    Exact Q_i^theta as an (|S|, |A|) table

    Global indices follow numpy.ravel_multi_index over the local sizes.
    """
    mdp.graph._check_agent(i)
    model = model or build_dense_model(mdp, policy, cap)
    q = solve_q(model, model.rewards[:, i])
    residual = bellman_residual(model, model.rewards[:, i], q)
    if residual > 1e-9:
        logger.warning("agent %d Bellman residual %.3g above 1e-9", i, residual)
    return q


def exact_objective(mdp: NetworkedMDP, policy: StationaryPolicy, model: Optional[DenseModel] = None) -> float:
    """J(theta): expected discounted reward from pi_0, averaged over agents"""
    model = model or build_dense_model(mdp, policy)
    total = 0.0
    for i in range(mdp.n):
        q = solve_q(model, model.rewards[:, i])
        total += float(model.initial @ (model.policy * q).sum(axis=1))
    return total / mdp.n


def monte_carlo_q(mdp: NetworkedMDP, policy: StationaryPolicy, i, s, a, rollouts, horizon, rng):
    """Rollout estimate of Q_i(s, a); returns (mean, standard error)"""
    returns = np.empty(rollouts)
    for k in range(rollouts):
        state, action = np.array(s, dtype=np.int64), np.array(a, dtype=np.int64)
        total, discount = 0.0, 1.0
        for _ in range(horizon):
            links = sample_links(mdp.link_dist, mdp.graph, rng)
            state, rewards = step(mdp, state, action, links, rng)
            total += discount * rewards[i]
            discount *= mdp.gamma
            action = policy.sample_joint(state, rng.random(mdp.n))
        returns[k] = total
    stderr = returns.std(ddof=1) / math.sqrt(rollouts) if rollouts > 1 else 0.0
    return float(returns.mean()), float(stderr)


def kernel_normalization_errors(mdp: NetworkedMDP, max_rows=1_000_000) -> List[KernelRow]:
    """List every kernel row reachable on this instance that is not a distribution"""
    dyn = mdp.dynamics
    if isinstance(dyn, TableDynamics):
        return dyn.normalization_errors()

    support = mdp.link_dist.support(mdp.graph, LINK_SUPPORT_LIMIT)
    if support is None:
        rng = make_rng(0, 'kernel-check')
        support = [(1.0, sample_links(mdp.link_dist, mdp.graph, rng)) for _ in range(64)]

    seen = set()
    bad = []
    rows = 0
    for _, links in support:
        for i in range(mdp.n):
            sources = tuple(links.state_sources(i).tolist())
            if (i, sources) in seen:
                continue
            seen.add((i, sources))
            s_space = itertools.product(*[range(mdp.state_sizes[j]) for j in sources])
            for s_src in s_space:
                for a_src in itertools.product(*[range(mdp.action_sizes[j]) for j in sources]):
                    rows += 1
                    if rows > max_rows:
                        raise OracleCapError(f"kernel check exceeds {max_rows} rows")
                    probs = np.asarray(dyn.transition_probs(i, sources, s_src, a_src), dtype=float)
                    total = float(probs.sum())
                    if abs(total - 1.0) > KERNEL_TOL or np.any(probs < 0):
                        bad.append(KernelRow(i, sources, tuple(s_src), tuple(a_src), total))
    return bad


# ======================================================================
# Stationarity and mixing
# ======================================================================

@dataclass
class MixingReport:
    stationary: np.ndarray
    K1: float
    K2: float
    mu2: float
    kappa: int
    sigma_prime: List[float]


def _check_ergodic(P):
    moduli = np.sort(np.abs(linalg.eigvals(P)))[::-1]
    unit = int(np.sum(moduli > 1.0 - 1e-9))
    if unit > 1:
        raise ChainError(f"chain is reducible or periodic: {unit} eigenvalues on the unit circle")
    return moduli


def chain_stationary(P, tol=1e-10, max_iter=1_000_000) -> np.ndarray:
    """Stationary distribution by power iteration; residual max|dP - d| <= tol"""
    P = np.asarray(P, dtype=float)
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise PreconditionError("transition matrix must be square")
    if P.shape[0] > DENSE_CHAIN_CAP:
        raise OracleCapError(f"chain with {P.shape[0]} states exceeds the dense cap {DENSE_CHAIN_CAP}")
    _check_ergodic(P)

    d = np.full(P.shape[0], 1.0 / P.shape[0])
    for _ in range(max_iter):
        nxt = d @ P
        nxt /= nxt.sum()
        if np.abs(nxt - d).max() <= tol:
            return nxt
        d = nxt
    raise ChainError(f"power iteration failed to contract within {max_iter} iterations")


def mixing_constants(P, d, horizon=200):
    """
    Geometric-mixing constants

    Returns:
        (K1, K2, mu2) with K2 = max(1, -1/ln mu2) and K1 the smallest value
        with sup_z TV(t|z) <= K1 exp(-t/K2) for all t <= horizon
    """
    P = np.asarray(P, dtype=float)
    moduli = _check_ergodic(P)
    mu2 = float(moduli[1]) if len(moduli) > 1 else 0.0
    K2 = 1.0 if mu2 <= 0.0 else max(1.0, -1.0 / math.log(mu2))

    K1 = 0.0
    power = np.eye(P.shape[0])
    for t in range(horizon + 1):
        tv = 0.5 * np.abs(power - d[None, :]).sum(axis=1).max()
        K1 = max(K1, tv * math.exp(t / K2))
        power = power @ P
    return K1, K2, mu2


def neighborhood_class_ids(mdp: NetworkedMDP, model: DenseModel, i, kappa) -> Tuple[np.ndarray, int]:
    """
    Class of each global pair z under (s_{N_i^kappa}, a_{N_i^kappa})

    Class ids use the same lexicographic order as the critic tables.
    """
    nb = list(mdp.graph.khop(i, kappa))
    s_dims = [mdp.state_sizes[j] for j in nb]
    a_dims = [mdp.action_sizes[j] for j in nb]
    s_ids = np.ravel_multi_index(tuple(model.states[:, nb].T), s_dims)
    a_ids = np.ravel_multi_index(tuple(model.actions[:, nb].T), a_dims)
    ids = (s_ids[:, None] * math.prod(a_dims) + a_ids[None, :]).ravel()
    return ids, math.prod(s_dims) * math.prod(a_dims)


def stationary_and_mixing(mdp: NetworkedMDP, policy: StationaryPolicy, kappa, model=None,
                          horizon=200) -> MixingReport:
    """Stationary distribution over Z = S x A, K1, K2 and sigma'(kappa) per agent"""
    model = model or build_dense_model(mdp, policy)
    P = model.pair_chain()
    if P.shape[0] > DENSE_CHAIN_CAP:
        raise OracleCapError(f"(s,a) chain with {P.shape[0]} states exceeds the dense cap {DENSE_CHAIN_CAP}")
    d = chain_stationary(P)
    K1, K2, mu2 = mixing_constants(P, d, horizon)

    sigma = []
    for i in range(mdp.n):
        ids, classes = neighborhood_class_ids(mdp, model, i, kappa)
        sigma.append(float(np.bincount(ids, weights=d, minlength=classes).min()))
    logger.info("mixing: K1=%.4g K2=%.4g mu2=%.4g min sigma'=%.4g", K1, K2, mu2, min(sigma))
    return MixingReport(d, K1, K2, mu2, int(kappa), sigma)

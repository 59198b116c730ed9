#!/usr/bin/env python3
"""
Environments
Wireless multi-access, SIS spreading and synthetic networked MDPs
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import networkx as nx
import numpy as np
from scipy.special import expit, softmax

from errors import ConfigError, PreconditionError
from netmdp import (GEOMETRIC, STATIC_LOCAL, AgentGraph, LinkDistribution, LocalDynamics, NetworkedMDP,
                    TablePolicy)

logger = logging.getLogger(__name__)

EMPTY_ACTION = 0


# ======================================================================
# Wireless multi-access
# ======================================================================

@dataclass(frozen=True)
class WirelessConfig:
    """
    Users on an h x w grid with c users per cell

    Each cell's users reach the access points on the cell's four corners.
    user_access, when given, replaces the grid layout with explicit
    access-point lists per user.
    """
    h: int = 5
    w: int = 5
    c: int = 1
    d: int = 2
    q: float = 0.5
    gamma: float = 0.7
    ap_probs: Optional[Tuple[float, ...]] = None
    user_access: Optional[Tuple[Tuple[int, ...], ...]] = None

    def __post_init__(self):
        if self.d < 1:
            raise PreconditionError(f"life span d must be at least 1, got {self.d}")
        if not 0.0 <= self.q <= 1.0:
            raise PreconditionError(f"arrival probability q must lie in [0,1], got {self.q}")
        if self.user_access is None and (self.h < 1 or self.w < 1 or self.c < 1):
            raise PreconditionError("grid dimensions and users per cell must be positive")
        if self.user_access is not None:
            object.__setattr__(self, 'user_access', tuple(tuple(int(y) for y in ys) for ys in self.user_access))
            if not self.user_access or any(len(ys) == 0 for ys in self.user_access):
                raise PreconditionError("every user needs at least one access point")
        if self.ap_probs is not None:
            object.__setattr__(self, 'ap_probs', tuple(float(p) for p in self.ap_probs))
            if len(self.ap_probs) != self.num_aps:
                raise PreconditionError(f"need {self.num_aps} access-point probabilities, got {len(self.ap_probs)}")
            if any(not 0.0 <= p <= 1.0 for p in self.ap_probs):
                raise PreconditionError("access-point success probabilities must lie in [0,1]")

    @property
    def num_aps(self) -> int:
        if self.user_access is not None:
            return max(max(ys) for ys in self.user_access) + 1
        return (self.h + 1) * (self.w + 1)

    def access_lists(self) -> List[Tuple[int, ...]]:
        if self.user_access is not None:
            return list(self.user_access)
        corners = []
        for r in range(self.h):
            for col in range(self.w):
                aps = tuple(sorted((r + dr) * (self.w + 1) + col + dc for dr in (0, 1) for dc in (0, 1)))
                corners.extend([aps] * self.c)
        return corners


class WirelessDynamics(LocalDynamics):
    """
    Queue bits with bit j-1 set for a packet of remaining life j

    Action 0 is empty; action 1 + (l-1)*|Y_i| + k sends the life-l packet
    to the k-th access point of Y_i. The success draw u[0] is shared by
    the transition and the reward so both see the same delivery.
    """
    uniforms_per_agent = 2

    def __init__(self, user_access, ap_probs, d, q):
        self.user_access = [tuple(ys) for ys in user_access]
        self.ap_probs = np.asarray(ap_probs, dtype=float)
        self.d = int(d)
        self.q = float(q)

    def decode(self, j, bits, action) -> Optional[Tuple[int, int]]:
        """Effective (slot, access point) of user j, or None for an empty action"""
        if action == EMPTY_ACTION:
            return None
        aps = self.user_access[j]
        slot, k = divmod(action - 1, len(aps))
        if not (bits >> slot) & 1:
            return None
        return slot, aps[k]

    def _attempt(self, i, sources, s_src, a_src):
        pos = sources.index(i)
        mine = self.decode(i, s_src[pos], a_src[pos])
        if mine is None:
            return None, 0.0
        slot, ap = mine
        for j, bits, action in zip(sources, s_src, a_src):
            if j == i:
                continue
            other = self.decode(j, bits, action)
            if other is not None and other[1] == ap:
                return slot, 0.0
        return slot, float(self.ap_probs[ap])

    def _advance(self, bits, delivered_slot):
        if delivered_slot is not None:
            bits &= ~(1 << delivered_slot)
        return bits >> 1

    def transition_probs(self, i, sources, s_src, a_src):
        bits = s_src[sources.index(i)]
        slot, success = self._attempt(i, sources, s_src, a_src)
        arrival = 1 << (self.d - 1)
        probs = np.zeros(2 ** self.d)
        for delivered, p_deliver in ((slot, success), (None, 1.0 - success)):
            if p_deliver == 0.0:
                continue
            aged = self._advance(bits, delivered)
            probs[aged] += p_deliver * (1.0 - self.q)
            probs[aged | arrival] += p_deliver * self.q
        return probs

    def expected_reward(self, i, sources, s_src, a_src):
        return self._attempt(i, sources, s_src, a_src)[1]

    def sample_transition(self, i, sources, s_src, a_src, u):
        bits = s_src[sources.index(i)]
        slot, success = self._attempt(i, sources, s_src, a_src)
        aged = self._advance(bits, slot if u[0] < success else None)
        # aging has emptied bit d-1
        if u[1] < self.q:
            aged |= 1 << (self.d - 1)
        return aged

    def sample_reward(self, i, sources, s_src, a_src, u):
        _, success = self._attempt(i, sources, s_src, a_src)
        return 1.0 if u[0] < success else 0.0

    def describe(self):
        return {'kind': 'wireless', 'd': self.d, 'q': self.q}


def conflict_graph(user_access) -> AgentGraph:
    """Users are adjacent iff they share an access point"""
    sharing = {}
    for i, aps in enumerate(user_access):
        for ap in aps:
            sharing.setdefault(ap, []).append(i)
    edges = set()
    for users in sharing.values():
        for a in users:
            for b in users:
                if a < b:
                    edges.add((a, b))
    return AgentGraph(len(user_access), sorted(edges))


def build_wireless(config: WirelessConfig, rng) -> NetworkedMDP:
    """
    Wireless multi-access networked MDP

    Access-point success probabilities are drawn from U[0,1] with rng when
    the config leaves them unset. Links are static-local with radii 1.
    pi0 is the arrival distribution (bit d-1 set w.p. q), not uniform.
    """
    access = config.access_lists()
    ap_probs = config.ap_probs
    if ap_probs is None:
        ap_probs = tuple(float(p) for p in rng.random(config.num_aps))
    graph = conflict_graph(access)
    n = len(access)
    state_sizes = [2 ** config.d] * n
    action_sizes = [1 + config.d * len(aps) for aps in access]

    arrival = np.zeros(2 ** config.d)
    arrival[0] = 1.0 - config.q
    arrival[1 << (config.d - 1)] += config.q

    metadata = {
        'ap_probs': list(ap_probs),
        'user_access': [list(aps) for aps in access],
        'd': config.d,
        'q': config.q,
    }
    logger.info("wireless network: %d users, %d access points", n, config.num_aps)
    return NetworkedMDP(graph, state_sizes, action_sizes, LinkDistribution.static_local(1, 1),
                        WirelessDynamics(access, ap_probs, config.d, config.q), config.gamma, 1.0,
                        init_dist=[arrival] * n, name='wireless', metadata=metadata)


def aloha_policy(mdp: NetworkedMDP, p_empty) -> TablePolicy:
    """
    Localized ALOHA benchmark on a wireless network

    Empty action with probability p_empty, otherwise the packet with the
    least remaining life goes to y in Y_i with probability proportional to
    p_y / (users sharing y). Rows with an empty queue take the empty action.
    """
    if not 0.0 <= p_empty <= 1.0:
        raise PreconditionError(f"p_empty must lie in [0,1], got {p_empty}")
    access = mdp.metadata['user_access']
    ap_probs = np.asarray(mdp.metadata['ap_probs'], dtype=float)
    d = mdp.metadata['d']
    sharers = np.zeros(len(ap_probs))
    for aps in access:
        sharers[list(aps)] += 1

    tables = []
    for i, aps in enumerate(access):
        weights = ap_probs[list(aps)] / sharers[list(aps)]
        if weights.sum() > 0:
            weights = weights / weights.sum()
        else:
            weights = np.full(len(aps), 1.0 / len(aps))
        table = np.zeros((2 ** d, mdp.action_sizes[i]))
        table[0, EMPTY_ACTION] = 1.0
        for bits in range(1, 2 ** d):
            slot = (bits & -bits).bit_length() - 1
            table[bits, EMPTY_ACTION] = p_empty
            start = 1 + slot * len(aps)
            table[bits, start:start + len(aps)] = (1.0 - p_empty) * weights
        tables.append(table)
    return TablePolicy(mdp.graph, 0, mdp.state_sizes, mdp.action_sizes, tables)


# ======================================================================
# SIS spreading
# ======================================================================

COST_S_RANGE = (1.0, 3.0)
COST_A_RANGE = (0.01, 0.20)
RECOVERY_RANGE = (0.1, 0.5)
INFECTION_RANGE = (0.5, 0.9)


@dataclass(frozen=True)
class SpreadConfig:
    """
    SIS grid; unset per-agent parameters are sampled from their ranges

    p_m = p_h / 4 and p_l = p_m / 4 are derived.
    """
    h: int = 5
    w: int = 5
    gamma: float = 0.7
    init_infection: float = 0.3
    c_s: Optional[Tuple[float, ...]] = None
    c_a: Optional[Tuple[float, ...]] = None
    p_r: Optional[Tuple[float, ...]] = None
    p_h: Optional[Tuple[float, ...]] = None
    edges: Optional[Tuple[Tuple[int, int], ...]] = None
    n: Optional[int] = None

    def __post_init__(self):
        if not 0.0 <= self.init_infection <= 1.0:
            raise PreconditionError(f"initial infection probability must lie in [0,1], got {self.init_infection}")
        for name in ('c_s', 'c_a', 'p_r', 'p_h'):
            values = getattr(self, name)
            if values is None:
                continue
            values = tuple(float(v) for v in values)
            object.__setattr__(self, name, values)
            if len(values) != self.num_agents:
                raise PreconditionError(f"{name} needs {self.num_agents} values, got {len(values)}")
        for name in ('p_r', 'p_h'):
            values = getattr(self, name)
            if values is not None and any(not 0.0 < v <= 1.0 for v in values):
                raise PreconditionError(f"{name} probabilities must lie in (0,1]")
        for name in ('c_s', 'c_a'):
            values = getattr(self, name)
            if values is not None and any(v <= 0 for v in values):
                raise PreconditionError(f"{name} costs must be positive")

    @property
    def num_agents(self) -> int:
        return self.n if self.n is not None else self.h * self.w

    def graph(self) -> AgentGraph:
        if self.n is not None:
            return AgentGraph(self.n, self.edges or ())
        return AgentGraph.grid(self.h, self.w)


class SISDynamics(LocalDynamics):
    """
    Susceptible (0) / infected (1) agents; action 1 is a control measure

    n_i and m_i count infected active neighbors without and with control.
    """

    def __init__(self, c_s, c_a, p_r, p_h):
        self.c_s = np.asarray(c_s, dtype=float)
        self.c_a = np.asarray(c_a, dtype=float)
        self.p_r = np.asarray(p_r, dtype=float)
        self.p_h = np.asarray(p_h, dtype=float)
        self.p_m = self.p_h / 4.0
        self.p_l = self.p_m / 4.0

    def escape_probability(self, i, own_action, unprotected, protected) -> float:
        if own_action == 1:
            return (1.0 - self.p_h[i]) ** unprotected * (1.0 - self.p_m[i]) ** protected
        return (1.0 - self.p_m[i]) ** unprotected * (1.0 - self.p_l[i]) ** protected

    def transition_probs(self, i, sources, s_src, a_src):
        pos = sources.index(i)
        if s_src[pos] == 1:
            stay_clear = self.p_r[i]
        else:
            unprotected = sum(1 for j, s, a in zip(sources, s_src, a_src) if j != i and s == 1 and a == 0)
            protected = sum(1 for j, s, a in zip(sources, s_src, a_src) if j != i and s == 1 and a == 1)
            stay_clear = self.escape_probability(i, a_src[pos], unprotected, protected)
        return np.array([stay_clear, 1.0 - stay_clear])

    def expected_reward(self, i, sources, s_src, a_src):
        pos = sources.index(i)
        return -self.c_a[i] * (a_src[pos] == 1) - self.c_s[i] * (s_src[pos] == 1)

    def describe(self):
        return {'kind': 'sis'}


def build_sis(config: SpreadConfig, rng) -> NetworkedMDP:
    """
    SIS networked MDP with symmetric geometric links 2^-d(i,j)

    Rewards depend on the agent's own coordinates only.
    """
    n = config.num_agents
    graph = config.graph()
    c_s = config.c_s or tuple(rng.uniform(*COST_S_RANGE, n).tolist())
    c_a = config.c_a or tuple(rng.uniform(*COST_A_RANGE, n).tolist())
    p_r = config.p_r or tuple(rng.uniform(*RECOVERY_RANGE, n).tolist())
    p_h = config.p_h or tuple(rng.uniform(*INFECTION_RANGE, n).tolist())

    dynamics = SISDynamics(c_s, c_a, p_r, p_h)
    r_bar = float(np.max(dynamics.c_s + dynamics.c_a))
    init = [np.array([1.0 - config.init_infection, config.init_infection])] * n
    metadata = {'c_s': list(c_s), 'c_a': list(c_a), 'p_r': list(p_r), 'p_h': list(p_h),
                'p_m': dynamics.p_m.tolist(), 'p_l': dynamics.p_l.tolist(),
                'init_infection': config.init_infection}
    links = LinkDistribution.geometric(1.0, 0.5, symmetric=True, reward_links='self')
    return NetworkedMDP(graph, [2] * n, [2] * n, links, dynamics, config.gamma, r_bar,
                        init_dist=init, name='sis', metadata=metadata)


# ======================================================================
# Synthetic
# ======================================================================

@dataclass(frozen=True)
class SyntheticConfig:
    """
    Random full-support kernels on an arbitrary graph

    links is a LinkDistribution description: static-local radii or
    geometric (c, lam).
    """
    graph: AgentGraph = field(default_factory=lambda: AgentGraph.path(3))
    state_size: int = 2
    action_size: int = 2
    links: dict = field(default_factory=lambda: {'kind': STATIC_LOCAL, 'alpha1': 1, 'alpha2': 1})
    gamma: float = 0.7
    r_bar: float = 1.0
    scale: float = 1.0

    def __post_init__(self):
        if self.state_size < 1 or self.action_size < 1:
            raise PreconditionError("local spaces must be nonempty")
        if self.r_bar <= 0:
            raise PreconditionError("r_bar must be positive")


class SyntheticDynamics(LocalDynamics):
    """
    Softmax kernels over additive own and neighbor logits

    Rewards are r_bar * sigmoid of additive own and neighbor terms.
    """

    def __init__(self, base, couple, reward_base, reward_couple, r_bar):
        self.base = np.asarray(base, dtype=float)
        self.couple = np.asarray(couple, dtype=float)
        self.reward_base = np.asarray(reward_base, dtype=float)
        self.reward_couple = np.asarray(reward_couple, dtype=float)
        self.r_bar = float(r_bar)

    def transition_probs(self, i, sources, s_src, a_src):
        logits = np.zeros(self.base.shape[-1])
        for j, s, a in zip(sources, s_src, a_src):
            logits += self.base[i, s, a] if j == i else self.couple[i, s, a]
        return softmax(logits)

    def expected_reward(self, i, sources, s_src, a_src):
        total = 0.0
        for j, s, a in zip(sources, s_src, a_src):
            total += self.reward_base[i, s, a] if j == i else self.reward_couple[i, s, a]
        return self.r_bar * float(expit(total))

    def describe(self):
        return {'kind': 'synthetic'}


def link_distribution_from_spec(spec) -> LinkDistribution:
    spec = dict(spec)
    kind = spec.pop('kind', STATIC_LOCAL)
    if kind == STATIC_LOCAL:
        return LinkDistribution.static_local(spec.get('alpha1', 1), spec.get('alpha2', 1))
    if kind == GEOMETRIC:
        return LinkDistribution.geometric(spec.get('c', 1.0), spec.get('lam', 0.5),
                                          spec.get('symmetric', False), spec.get('reward_links', 'sampled'))
    raise ConfigError(f"unknown link kind '{kind}'")


def build_synthetic(config: SyntheticConfig, rng) -> NetworkedMDP:
    n = config.graph.n
    S, A = config.state_size, config.action_size
    dynamics = SyntheticDynamics(
        config.scale * rng.normal(size=(n, S, A, S)),
        0.5 * config.scale * rng.normal(size=(n, S, A, S)),
        config.scale * rng.normal(size=(n, S, A)),
        0.5 * config.scale * rng.normal(size=(n, S, A)),
        config.r_bar,
    )
    return NetworkedMDP(config.graph, [S] * n, [A] * n, link_distribution_from_spec(config.links), dynamics,
                        config.gamma, config.r_bar, name='synthetic', metadata={'links': dict(config.links)})


# ======================================================================
# Spec dispatch
# ======================================================================

def graph_from_spec(spec) -> AgentGraph:
    kind = spec.get('kind')
    if kind == 'grid':
        return AgentGraph.grid(int(spec['h']), int(spec['w']))
    if kind == 'path':
        return AgentGraph.path(int(spec['n']))
    if kind == 'edges':
        return AgentGraph(int(spec['n']), [tuple(e) for e in spec.get('edges', [])])
    if kind == 'cycle':
        return AgentGraph.from_networkx(nx.cycle_graph(int(spec['n'])))
    raise ConfigError(f"unknown graph kind '{kind}'")


WIRELESS_KEYS = {'kind', 'h', 'w', 'c', 'd', 'q', 'gamma', 'ap_probs', 'user_access'}
SIS_KEYS = {'kind', 'h', 'w', 'gamma', 'init_infection', 'c_s', 'c_a', 'p_r', 'p_h', 'graph'}
SYNTHETIC_KEYS = {'kind', 'graph', 'state_size', 'action_size', 'links', 'gamma', 'r_bar', 'scale'}
ENVIRONMENT_KEYS = {'wireless': WIRELESS_KEYS, 'sis': SIS_KEYS, 'synthetic': SYNTHETIC_KEYS}


def unknown_keys(spec) -> List[str]:
    allowed = ENVIRONMENT_KEYS.get(spec.get('kind'), set())
    return sorted(k for k in spec if k not in allowed)


def build_environment(spec, rng) -> NetworkedMDP:
    """
    Build the environment named by spec['kind'] (wireless, sis or synthetic)

    rng drives every sampled parameter.
    """
    kind = spec.get('kind')
    if kind not in ENVIRONMENT_KEYS:
        raise ConfigError(f"unknown environment kind '{kind}'")
    extra = unknown_keys(spec)
    if extra:
        raise ConfigError(f"unknown {kind} environment key(s): {', '.join(extra)}")
    params = {k: v for k, v in spec.items() if k != 'kind'}

    if kind == 'wireless':
        return build_wireless(WirelessConfig(**params), rng)
    if kind == 'sis':
        graph = params.pop('graph', None)
        if graph is not None:
            built = graph_from_spec(graph)
            params['n'] = built.n
            params['edges'] = tuple(sorted(built.edges))
        return build_sis(SpreadConfig(**params), rng)
    if 'graph' in params:
        params['graph'] = graph_from_spec(params['graph'])
    return build_synthetic(SyntheticConfig(**params), rng)

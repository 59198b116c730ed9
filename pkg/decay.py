#!/usr/bin/env python3
"""
Decay Estimation
Monte-Carlo information-spread times and closed-form decay bounds
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, Mapping, Optional, Sequence

import numpy as np

from errors import PreconditionError
from netmdp import STATIC_LOCAL, AgentGraph, LinkDistribution, make_rng, sample_links

logger = logging.getLogger(__name__)

EXPONENTIAL = 'exponential'
NEAR_EXPONENTIAL = 'near-exponential'


@dataclass(frozen=True)
class SpreadSample:
    """
    One realized spread time X_i(kappa)

    x is inf when N_{-i}^kappa is empty; truncated samples carry x = t_max.
    """
    i: int
    kappa: int
    x: float
    truncated: bool = False

    @property
    def infinite(self):
        return math.isinf(self.x)


def policy_links(graph: AgentGraph, beta) -> np.ndarray:
    """L^a: every pair within beta hops"""
    return graph.distance <= beta


def _expand(reach, links):
    return (reach.astype(np.uint8) @ links.astype(np.uint8)) > 0


def default_horizon(kappa, gamma) -> int:
    return max(1, math.ceil(10 * kappa / (1.0 - gamma)))


def sample_spread_time(graph: AgentGraph, link_dist: LinkDistribution, beta, i, kappa, t_max, rng) -> SpreadSample:
    """
    Simulate the reachability process behind X_i(kappa)

    Starts from N_{-i}^kappa expanded through L^a. At step t the sampled
    L^r_t is checked against agent i, then the reachable set grows through
    L^s_t followed by L^a.
    """
    if t_max < 1:
        raise PreconditionError(f"t_max must be at least 1, got {t_max}")
    exterior = graph.exterior(i, kappa)
    if not exterior:
        return SpreadSample(i, kappa, math.inf)

    la = policy_links(graph, beta)
    reach = np.zeros(graph.n, dtype=bool)
    reach[list(exterior)] = True
    reach = _expand(reach, la)
    for t in range(t_max):
        links = sample_links(link_dist, graph, rng)
        if np.any(reach & links.lr[:, i]):
            return SpreadSample(i, kappa, t)
        reach = _expand(_expand(reach, links.ls), la)
    return SpreadSample(i, kappa, t_max, truncated=True)


def spread_samples(graph, link_dist, beta, i, kappa, count, gamma, t_max=None, seed=0) -> List[SpreadSample]:
    """
    Draw `count` spread times on keyed streams

    Sample k uses the same stream for every kappa, so X_i(kappa) is
    pathwise nondecreasing in kappa.
    """
    t_max = t_max or default_horizon(kappa, gamma)
    return [sample_spread_time(graph, link_dist, beta, i, kappa, t_max, make_rng(seed, 'spread', i, k))
            for k in range(count)]


@dataclass(frozen=True)
class MuEstimate:
    mu: float
    stderr: float
    mean_discount: float
    stderr_discount: float
    samples: int
    truncated: int
    infinite: int


def estimate_mu(samples: Sequence[SpreadSample], gamma) -> MuEstimate:
    """mu(kappa) = E[gamma^X] / (1 - gamma) with its standard error"""
    if not samples:
        raise PreconditionError("need at least one spread sample")
    if not 0.0 <= gamma < 1.0:
        raise PreconditionError(f"gamma must lie in [0,1), got {gamma}")

    values = np.array([0.0 if s.infinite else gamma ** s.x for s in samples])
    truncated = sum(1 for s in samples if s.truncated)
    infinite = sum(1 for s in samples if s.infinite)
    if truncated:
        logger.info("%d of %d spread samples truncated; they contribute gamma^t_max", truncated, len(samples))

    mean = float(values.mean())
    stderr = float(values.std(ddof=1) / math.sqrt(len(values))) if len(values) > 1 else 0.0
    return MuEstimate(mean / (1.0 - gamma), stderr / (1.0 - gamma), mean, stderr,
                      len(values), truncated, infinite)


@dataclass(frozen=True)
class DecayBound:
    """kappa -> bound on E[gamma^X]"""
    kind: str
    C: float
    rho: float
    constants: Mapping[str, float] = field(default_factory=dict)

    def __call__(self, kappa) -> float:
        if self.kind == EXPONENTIAL:
            return self.C * self.rho ** kappa
        return self.C * self.rho ** (kappa / (1.0 + math.log(kappa + 1.0)))

    evaluate = __call__


def exponential_constants(gamma, alpha1, alpha2, beta) -> DecayBound:
    """rho = gamma^(1/(alpha1+beta)), C = gamma^(-alpha2/(alpha1+beta))"""
    if not 0.0 < gamma < 1.0:
        raise PreconditionError(f"gamma must lie in (0,1), got {gamma}")
    reach = alpha1 + beta
    if reach <= 0:
        raise PreconditionError("alpha1 + beta must be at least 1")
    rho = gamma ** (1.0 / reach)
    C = gamma ** (-alpha2 / reach)
    return DecayBound(EXPONENTIAL, C, rho, {'alpha1': alpha1, 'alpha2': alpha2, 'beta': beta})


def near_exponential_bound(gamma, c, lam, c0, n0, beta) -> DecayBound:
    """
    Near-exponential bound for geometric link distributions

    Evaluating at kappa bounds E[gamma^X_i(kappa - 1)]. rho is the midpoint
    of its admissible interval.
    """
    if not 0.0 < gamma < 1.0:
        raise PreconditionError(f"gamma must lie in (0,1), got {gamma}")
    if c < 1 or c0 < 1 or n0 < 1:
        raise PreconditionError(f"need c >= 1, c0 >= 1, n0 >= 1; got c={c}, c0={c0}, n0={n0}")
    if not 0.0 < lam < 1.0:
        raise PreconditionError(f"lambda must lie in (0,1), got {lam}")
    if beta < 0:
        raise PreconditionError(f"beta must be nonnegative, got {beta}")

    root_lam = math.sqrt(lam)
    log_inv_lam = math.log(1.0 / lam)
    c_g = c0 * c * (beta + 1) ** (n0 + 1) * lam ** (-beta)
    n1 = 2 * n0
    c2 = c_g * c0 ** 2 / (1.0 - root_lam)
    c3 = 0.5 * lam ** 0.25 * (1.0 - root_lam) * (1.0 / math.sqrt(gamma) - 1.0)
    q = max(math.log(c2) - math.log(c3) - 2.0 * math.log(1.0 - math.sqrt(gamma)), 2 * n1 + 4) / log_inv_lam
    lower = max(gamma ** (1.0 / (2.0 * q)), lam ** 0.25)
    rho = 0.5 * (lower + 1.0)
    C = rho ** (-max(q + 1.0, 2.0 * n0 / log_inv_lam))
    constants = {'c_g': c_g, 'n1': n1, 'c2': c2, 'c3': c3, 'q': q, 'rho_lower': lower}
    return DecayBound(NEAR_EXPONENTIAL, C, rho, constants)


def decay_table(graph: AgentGraph, link_dist: LinkDistribution, beta, i, kappas, gamma, count, seed=0,
                c0=1.0, n0=1) -> List[dict]:
    """
    Rows of (kappa, mc_mean, mc_stderr, exp_bound, near_exp_bound)

    mc_mean estimates E[gamma^X_i(kappa)]. exp_bound is filled for
    static-local links, near_exp_bound (evaluated at kappa + 1) for
    geometric links.
    """
    exp_bound: Optional[DecayBound] = None
    near_bound: Optional[DecayBound] = None
    if link_dist.kind == STATIC_LOCAL:
        exp_bound = exponential_constants(gamma, link_dist.alpha1, link_dist.alpha2, beta)
    elif 0.0 < link_dist.lam < 1.0:
        near_bound = near_exponential_bound(gamma, max(1.0, link_dist.c), link_dist.lam, c0, n0, beta)

    rows = []
    for kappa in kappas:
        estimate = estimate_mu(spread_samples(graph, link_dist, beta, i, kappa, count, gamma, seed=seed), gamma)
        rows.append({
            'kappa': int(kappa),
            'mc_mean': estimate.mean_discount,
            'mc_stderr': estimate.stderr_discount,
            'exp_bound': exp_bound(kappa) if exp_bound else None,
            'near_exp_bound': near_bound(kappa + 1) if near_bound else None,
        })
        logger.info("kappa=%d E[gamma^X]=%.5f +- %.5f", kappa, estimate.mean_discount, estimate.stderr_discount)
    return rows

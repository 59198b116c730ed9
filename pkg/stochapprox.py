#!/usr/bin/env python3
"""
Stochastic Approximation with State Aggregation
Projection, weighted norms, fixed-point oracle, iterate updates and bound constants
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from errors import ContractionError, PreconditionError

logger = logging.getLogger(__name__)

NON_CONTRACTION_STREAK = 10


@dataclass(frozen=True, eq=False)
class AggregationMap:
    """Surjection h from n ground states onto m abstract states"""
    h: np.ndarray
    m: int

    def __post_init__(self):
        h = np.asarray(self.h, dtype=np.int64)
        object.__setattr__(self, 'h', h)
        if h.ndim != 1 or h.size == 0:
            raise PreconditionError("aggregation map must be a nonempty 1-d array")
        if h.min() < 0 or h.max() >= self.m:
            raise PreconditionError(f"aggregation map values must lie in [0, {self.m})")
        hit = np.bincount(h, minlength=self.m)
        if np.any(hit == 0):
            raise PreconditionError(f"aggregation map is not surjective; empty classes {np.flatnonzero(hit == 0).tolist()}")

    @classmethod
    def identity(cls, n):
        return cls(np.arange(n), n)

    @classmethod
    def from_labels(cls, labels):
        labels = np.asarray(labels, dtype=np.int64)
        return cls(labels, int(labels.max()) + 1)

    @property
    def n(self):
        return self.h.size

    def phi(self, x) -> np.ndarray:
        """Phi x: copy each abstract value to its class members"""
        return np.asarray(x)[self.h]

    def phi_matrix(self) -> np.ndarray:
        phi = np.zeros((self.n, self.m))
        phi[np.arange(self.n), self.h] = 1.0
        return phi

    def members(self, j):
        return np.flatnonzero(self.h == j)

    def class_mass(self, d) -> np.ndarray:
        return np.bincount(self.h, weights=np.asarray(d, dtype=float), minlength=self.m)


@dataclass(frozen=True, eq=False)
class WeightVector:
    v: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.v, dtype=float)
        object.__setattr__(self, 'v', v)
        if v.ndim != 1 or np.any(v <= 0):
            raise PreconditionError("weight vector entries must be strictly positive")

    @classmethod
    def ones(cls, m):
        return cls(np.ones(m))

    @property
    def lower(self) -> float:
        return float(self.v.min())


def weighted_norm(x, v: WeightVector, h: Optional[AggregationMap] = None) -> float:
    """sup_i |x_i| / v_i, or / v_{h(i)} on the ground space"""
    x = np.asarray(x, dtype=float)
    weights = v.v if h is None else v.v[h.h]
    if x.shape != weights.shape:
        raise PreconditionError(f"dimension mismatch: vector of length {x.size}, weights of length {weights.size}")
    return float(np.max(np.abs(x) / weights)) if x.size else 0.0


def project_pi(h: AggregationMap, d, y) -> np.ndarray:
    """Pi y: d-weighted class averages"""
    d = np.asarray(d, dtype=float)
    y = np.asarray(y, dtype=float)
    if d.shape != (h.n,) or y.shape != (h.n,):
        raise PreconditionError("d and y must match the ground dimension of h")
    mass = h.class_mass(d)
    if np.any(mass <= 0):
        raise PreconditionError(f"classes {np.flatnonzero(mass <= 0).tolist()} have zero stationary mass")
    return np.bincount(h.h, weights=d * y, minlength=h.m) / mass


@dataclass(frozen=True)
class ContractionOperator:
    """
    F on the ground space with declared contraction factor gamma and
    affine bound C (||F(x)||_v <= gamma ||x||_v + C)
    """
    apply: Callable[[np.ndarray], np.ndarray]
    gamma: float
    C: float
    name: str = 'F'

    def __call__(self, y):
        return np.asarray(self.apply(np.asarray(y, dtype=float)), dtype=float)

    def contraction_ratio(self, h: AggregationMap, d, v: WeightVector, rng, pairs=1000, scale=10.0) -> float:
        """Largest ||PiF(Phi x) - PiF(Phi y)||_v / ||x - y||_v over random pairs"""
        worst = 0.0
        for _ in range(pairs):
            x = rng.uniform(-scale, scale, h.m)
            y = rng.uniform(-scale, scale, h.m)
            gap = weighted_norm(x - y, v)
            if gap == 0:
                continue
            image = project_pi(h, d, self(h.phi(x))) - project_pi(h, d, self(h.phi(y)))
            worst = max(worst, weighted_norm(image, v) / gap)
        return worst


def fixed_point(F: ContractionOperator, h: AggregationMap, d, v: Optional[WeightVector] = None,
                tol=1e-10) -> np.ndarray:
    """
    Fixed point of x -> PiF(Phi x), iterated from 0

    Raises ContractionError when the residual grows for 10 consecutive
    iterations or the geometric iteration cap is exhausted.
    """
    if tol <= 0:
        raise PreconditionError("tol must be positive")
    v = v or WeightVector.ones(h.m)
    x = np.zeros(h.m)
    nxt = project_pi(h, d, F(h.phi(x)))
    first = weighted_norm(nxt, v)
    if first == 0:
        return nxt
    if F.gamma <= 0:
        cap = 11
    else:
        cap = max(1, math.ceil(math.log(tol * (1.0 - F.gamma) / first) / math.log(F.gamma))) + 10

    previous = math.inf
    streak = 0
    for k in range(cap):
        residual = weighted_norm(nxt - x, v)
        if residual <= tol:
            logger.debug("fixed point reached after %d iterations (residual %.3g)", k, residual)
            return nxt
        streak = streak + 1 if residual > previous else 0
        if streak >= NON_CONTRACTION_STREAK:
            raise ContractionError(f"{F.name} violates its gamma={F.gamma} contraction contract: "
                                   f"residual increased for {NON_CONTRACTION_STREAK} consecutive iterations")
        previous = residual
        x = nxt
        nxt = project_pi(h, d, F(h.phi(x)))
    raise ContractionError(f"{F.name} did not reach tol={tol} within {cap} iterations; "
                           f"the gamma={F.gamma} contraction contract does not hold")


@dataclass
class SAState:
    """
    Iterate of the aggregated stochastic-approximation scheme

    w_bar enables the per-step noise assertion.
    """
    h: AggregationMap
    H: float
    t0: float
    x: np.ndarray = None
    t: int = 0
    w_bar: Optional[float] = None

    def __post_init__(self):
        if self.x is None:
            self.x = np.zeros(self.h.m)

    def alpha(self) -> float:
        return self.H / (self.t + self.t0)


def sa_step(state: SAState, i_t, f_val, w) -> SAState:
    """x_{h(i_t)} += alpha_t (f_val - x_{h(i_t)} + w); in place"""
    if state.w_bar is not None:
        assert abs(w) <= state.w_bar + 1e-12, f"noise {w} exceeds w_bar {state.w_bar}"
    j = state.h.h[i_t]
    state.x[j] += state.alpha() * (f_val - state.x[j] + w)
    state.t += 1
    return state


def x_bar(gamma, y_star_norm, w_bar, v_lower) -> float:
    """Almost-sure iterate bound ((1+gamma)||y*||_v + w_bar/v_lower) / (1-gamma)"""
    return ((1.0 + gamma) * y_star_norm + w_bar / v_lower) / (1.0 - gamma)


def schedule_H(sigma_prime, gamma) -> float:
    return 2.0 / (sigma_prime * (1.0 - gamma))


def schedule_t0(H, K2, T) -> float:
    return max(4.0 * H, 2.0 * K2 * math.log(T))


@dataclass(frozen=True)
class BoundConstants:
    Ca: float
    Ca_prime: float
    parts: dict = field(default_factory=dict)

    def envelope(self, T, t0) -> float:
        """C_a / sqrt(T + t0) + C_a' / (T + t0)"""
        return self.Ca / math.sqrt(T + t0) + self.Ca_prime / (T + t0)


def _check_schedule(H, t0, T, K1, K2, sigma_prime, gamma, m, delta):
    if not 0.0 <= gamma < 1.0:
        raise PreconditionError(f"gamma must lie in [0,1), got {gamma}")
    if not 0.0 < sigma_prime <= 1.0:
        raise PreconditionError(f"sigma' must lie in (0,1], got {sigma_prime}")
    if not 0.0 < delta < 1.0:
        raise PreconditionError(f"delta must lie in (0,1), got {delta}")
    if T < 3:
        raise PreconditionError(f"T must be at least 3 for ln ln T > 0, got {T}")
    if K1 < 0 or K2 < 1 or m < 1:
        raise PreconditionError(f"need K1 >= 0, K2 >= 1, m >= 1; got K1={K1}, K2={K2}, m={m}")
    if H < schedule_H(sigma_prime, gamma) * (1.0 - 1e-12):
        raise PreconditionError(f"H={H} below 2/(sigma'(1-gamma)) = {schedule_H(sigma_prime, gamma)}")
    if not math.isclose(t0, schedule_t0(H, K2, T), rel_tol=1e-9):
        raise PreconditionError(f"t0={t0} must equal max(4H, 2 K2 ln T) = {schedule_t0(H, K2, T)}")


def bound_constants(H, t0, T, K1, K2, sigma_prime, gamma, x_bar, C, w_bar, v_lower, m, delta) -> BoundConstants:
    """High-probability error constants (C_a, C_a') of the aggregated SA scheme"""
    _check_schedule(H, t0, T, K1, K2, sigma_prime, gamma, m, delta)
    log_T = math.log(T)
    C1 = 2.0 * x_bar + C + w_bar / v_lower
    C2 = 4.0 * x_bar + 2.0 * C + w_bar / v_lower
    C3 = 2.0 * K1 * (2.0 * x_bar + C) * (1.0 + 2.0 * K2 + 4.0 * H)
    Ca = (4.0 * H * C2 / (1.0 - gamma)) * math.sqrt(
        K2 * log_T * (math.log(4.0 * m * K2 * T / delta) + math.log(log_T)))
    Ca_prime = 4.0 * max((48.0 * K2 * C1 * H * log_T + sigma_prime * C3) / ((1.0 - gamma) * sigma_prime),
                         2.0 * x_bar * (2.0 * K2 * log_T + t0) / (1.0 - gamma))
    return BoundConstants(Ca, Ca_prime, {'C1': C1, 'C2': C2, 'C3': C3})


def td_bound_constants(H, t0, T, K1, K2, sigma_prime, gamma, r_bar, m, delta) -> BoundConstants:
    """
    Constants specialized to TD(0), Q-learning and the critic

    The critic passes m = f(kappa).
    """
    _check_schedule(H, t0, T, K1, K2, sigma_prime, gamma, m, delta)
    log_T = math.log(T)
    scale = r_bar / (1.0 - gamma) ** 2
    Ca = 40.0 * H * scale * math.sqrt(K2 * log_T * (math.log(4.0 * m * K2 * T / delta) + math.log(log_T)))
    C4 = 4.0 * K1 * (1.0 + 2.0 * K2 + 4.0 * H)
    Ca_prime = 8.0 * scale * max(144.0 * K2 * H * log_T / sigma_prime + C4, 2.0 * K2 * log_T + t0)
    return BoundConstants(Ca, Ca_prime, {'C4': C4})

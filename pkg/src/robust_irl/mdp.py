"""Finite MDPs with binary-feature linear rewards, planners, and the ILE metric.

States and actions are referenced by integer index everywhere; ``Mdp.states``
keeps the ``State`` records so geometry-aware code can map an index back to
a grid cell and heading. Policies are ``(S, A)`` arrays of action
probabilities and value functions are length-``S`` arrays.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import softmax

from .errors import ConfigurationError, ValidationError

STOCHASTIC_ATOL = 1e-9
TIE_ATOL = 1e-9


class Heading(enum.IntEnum):
    N = 0
    E = 1
    S = 2
    W = 3

    @property
    def vector(self) -> tuple[int, int]:
        """Unit step as (d_row, d_col) on the grid (rows grow downward)."""
        return _HEADING_STEPS[self]

    def rotated(self, quarter_turns: int) -> "Heading":
        return Heading((self.value + quarter_turns) % 4)


_HEADING_STEPS = {
    Heading.N: (-1, 0),
    Heading.E: (0, 1),
    Heading.S: (1, 0),
    Heading.W: (0, -1),
}


@dataclass(frozen=True, order=True)
class State:
    cell: int
    orientation: Heading = Heading.N


class Norm(str, enum.Enum):
    L1 = "L1"
    L2 = "L2"
    LINF = "Linf"


def _frozen(array, dtype=float) -> np.ndarray:
    out = np.array(array, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class Mdp:
    """The expert's decision model.

    ``transition[s, a, s']`` is Pr(s' | s, a). ``horizon`` is L: trajectories
    hold L + 1 state-action pairs. ``discount`` is only used by the
    infinite-horizon planners that feed ILE and the Boltzmann expert.
    """

    states: tuple
    actions: tuple
    transition: np.ndarray
    start: np.ndarray
    horizon: int
    discount: float = 0.95

    def __post_init__(self):
        object.__setattr__(self, "states", tuple(self.states))
        object.__setattr__(self, "actions", tuple(self.actions))
        object.__setattr__(self, "transition", _frozen(self.transition))
        object.__setattr__(self, "start", _frozen(self.start))
        validate_mdp(self)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    def with_horizon(self, horizon: int) -> "Mdp":
        return Mdp(self.states, self.actions, self.transition, self.start,
                   horizon, self.discount)


def validate_mdp(mdp: Mdp) -> None:
    t = mdp.transition
    if t.ndim != 3 or t.shape[0] != t.shape[2]:
        raise ValidationError(f"transition must have shape (S, A, S), got {t.shape}")
    n_s, n_a, _ = t.shape
    if len(mdp.states) != n_s or len(mdp.actions) != n_a:
        raise ValidationError("state/action lists disagree with the transition table")
    if np.any(t < 0) or not np.all(np.isfinite(t)):
        raise ValidationError("transition probabilities must be finite and nonnegative")
    rows = t.sum(axis=2)
    if np.max(np.abs(rows - 1.0)) > STOCHASTIC_ATOL:
        bad = np.argwhere(np.abs(rows - 1.0) > STOCHASTIC_ATOL)[0]
        raise ValidationError(f"transition row (s={bad[0]}, a={bad[1]}) sums to {rows[tuple(bad)]}")
    if mdp.start.shape != (n_s,) or np.any(mdp.start < 0):
        raise ValidationError("start must be a nonnegative vector over states")
    if abs(mdp.start.sum() - 1.0) > STOCHASTIC_ATOL:
        raise ValidationError(f"start distribution sums to {mdp.start.sum()}")
    if int(mdp.horizon) != mdp.horizon or mdp.horizon < 1:
        raise ValidationError(f"horizon must be a positive integer, got {mdp.horizon}")
    if not 0.0 < mdp.discount < 1.0:
        raise ValidationError(f"discount must lie in (0, 1), got {mdp.discount}")


@dataclass(frozen=True, eq=False)
class FeatureSet:
    """Binary features tabulated over (state, action): ``table[s, a, k]``."""

    table: np.ndarray
    names: tuple = field(default=())

    def __post_init__(self):
        table = np.asarray(self.table, dtype=float)
        if table.ndim != 3:
            raise ConfigurationError(f"feature table must have shape (S, A, K), got {table.shape}")
        if not np.all((table == 0.0) | (table == 1.0)):
            raise ValidationError("features must be exactly 0 or 1")
        object.__setattr__(self, "table", _frozen(table))
        names = tuple(self.names) or tuple(f"f{k}" for k in range(table.shape[2]))
        if len(names) != table.shape[2]:
            raise ConfigurationError("one name per feature required")
        object.__setattr__(self, "names", names)

    @property
    def k(self) -> int:
        return self.table.shape[2]

    def evaluate(self, s: int, a: int) -> np.ndarray:
        return self.table[s, a]


def _check_theta(theta, feats: FeatureSet) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (feats.k,):
        raise ConfigurationError(f"theta has shape {theta.shape}, expected ({feats.k},)")
    if not np.all(np.isfinite(theta)):
        raise ConfigurationError("theta must be finite")
    return theta


def reward(s: int, a: int, theta, feats: FeatureSet) -> float:
    theta = _check_theta(theta, feats)
    return float(feats.evaluate(s, a) @ theta)


def reward_table(theta, feats: FeatureSet) -> np.ndarray:
    """R[s, a] = theta . phi(s, a) for every pair."""
    theta = _check_theta(theta, feats)
    return feats.table @ theta


def _check_reward(mdp: Mdp, r) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    if r.shape != (mdp.n_states, mdp.n_actions):
        raise ConfigurationError(f"reward table has shape {r.shape}, expected "
                                 f"({mdp.n_states}, {mdp.n_actions})")
    if not np.all(np.isfinite(r)):
        raise ConfigurationError("rewards must be finite")
    return r


def q_values(mdp: Mdp, r, tol: float = 1e-8, max_iter: int = 100_000) -> np.ndarray:
    """Optimal discounted Q-values by value iteration."""
    r = _check_reward(mdp, r)
    gamma = mdp.discount
    # Stop once the fixed-point error bound drops below tol.
    stop = tol * (1.0 - gamma) / (2.0 * gamma)
    v = np.zeros(mdp.n_states)
    for _ in range(max_iter):
        q = r + gamma * (mdp.transition @ v)
        v_new = q.max(axis=1)
        if np.max(np.abs(v_new - v)) < stop:
            v = v_new
            break
        v = v_new
    return r + gamma * (mdp.transition @ v)


def greedy_policy(q: np.ndarray) -> np.ndarray:
    """Deterministic policy picking the lowest-index action among near-ties."""
    best = q.max(axis=1, keepdims=True)
    choice = np.argmax(q >= best - TIE_ATOL, axis=1)
    pi = np.zeros_like(q)
    pi[np.arange(q.shape[0]), choice] = 1.0
    return pi


def value_iteration(mdp: Mdp, r, tol: float = 1e-8) -> tuple[np.ndarray, np.ndarray]:
    """Return the optimal value function and its greedy deterministic policy."""
    q = q_values(mdp, r, tol=tol)
    return q.max(axis=1), greedy_policy(q)


def validate_policy(pi, mdp: Mdp) -> np.ndarray:
    pi = np.asarray(pi, dtype=float)
    if pi.shape != (mdp.n_states, mdp.n_actions):
        raise ConfigurationError(f"policy has shape {pi.shape}")
    if np.any(pi < 0) or np.max(np.abs(pi.sum(axis=1) - 1.0)) > STOCHASTIC_ATOL:
        raise ValidationError("policy rows must be probability vectors")
    return pi


def evaluate_policy(mdp: Mdp, pi, r) -> np.ndarray:
    """Solve V = r_pi + gamma P_pi V directly."""
    pi = validate_policy(pi, mdp)
    r = _check_reward(mdp, r)
    r_pi = np.sum(pi * r, axis=1)
    p_pi = np.einsum("sa,sat->st", pi, mdp.transition)
    lhs = np.eye(mdp.n_states) - mdp.discount * p_pi
    return np.linalg.solve(lhs, r_pi)


def boltzmann_policy(mdp: Mdp, r, beta: float = 5.0) -> np.ndarray:
    """Pr(a | s) proportional to exp(beta * Q*(s, a))."""
    if beta < 0:
        raise ConfigurationError(f"beta must be nonnegative, got {beta}")
    q = q_values(mdp, r)
    return softmax(beta * q, axis=1)


def ile(v_learned: Sequence[float], v_expert: Sequence[float], norm: Norm | str = Norm.L2) -> float:
    """Inverse learning error: the norm of the value-function gap."""
    v_learned = np.asarray(v_learned, dtype=float)
    v_expert = np.asarray(v_expert, dtype=float)
    if v_learned.shape != v_expert.shape:
        raise ConfigurationError(f"value functions differ in shape: {v_learned.shape} vs {v_expert.shape}")
    diff = v_learned - v_expert
    norm = Norm(norm)
    if norm is Norm.L1:
        return float(np.sum(np.abs(diff)))
    if norm is Norm.LINF:
        return float(np.max(np.abs(diff))) if diff.size else 0.0
    return float(np.sqrt(np.sum(diff * diff)))


def learned_policy_ile(mdp: Mdp, feats: FeatureSet, theta_learned, theta_true,
                       norm: Norm | str = Norm.L2, beta: Optional[float] = None) -> float:
    """ILE of a learned reward, both policies scored on the true reward.

    By default both policies are greedy in their own reward, which makes the
    score blind to the arbitrary scale of learned weights. With ``beta`` set,
    both act by the Boltzmann policy at that temperature instead.
    """
    r_true = reward_table(theta_true, feats)
    r_learned = reward_table(theta_learned, feats)
    if beta is None:
        v_expert, _ = value_iteration(mdp, r_true)
        _, pi_learned = value_iteration(mdp, r_learned)
    else:
        v_expert = evaluate_policy(mdp, boltzmann_policy(mdp, r_true, beta), r_true)
        pi_learned = boltzmann_policy(mdp, r_learned, beta)
    return ile(evaluate_policy(mdp, pi_learned, r_true), v_expert, norm)

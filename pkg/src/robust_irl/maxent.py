"""Maximum-entropy IRL over finite-horizon trajectories.

The trajectory distribution is the exponential family

    Pr(T) = exp(theta . f(T)) / n(theta)

supported on dynamics-feasible trajectories (positive start mass and positive
probability for every transition), where f(T) sums the binary features of
the L + 1 state-action pairs of T. The dual

    log n(theta) - theta . phi_hat

is convex; its gradient is the model feature expectation minus the target,
computed either by exhaustive enumeration or by a forward-backward pass over
the horizon. All normalizers are handled in log space.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.special import logsumexp

from ._fb import forward_backward
from .errors import CapacityError, ConfigurationError, DivergenceError, PreconditionError
from .mdp import FeatureSet, Mdp

log = logging.getLogger(__name__)

DEFAULT_ENUMERATION_CAP = 1_000_000


@dataclass(frozen=True)
class Trajectory:
    """L + 1 (state, action) index pairs, steps 0..L."""

    states: tuple
    actions: tuple

    def __post_init__(self):
        object.__setattr__(self, "states", tuple(int(s) for s in self.states))
        object.__setattr__(self, "actions", tuple(int(a) for a in self.actions))
        if len(self.states) != len(self.actions):
            raise ConfigurationError("states and actions must have equal length")
        if not self.states:
            raise ConfigurationError("a trajectory needs at least one step")

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[int, int]]) -> "Trajectory":
        pairs = list(pairs)
        return cls(tuple(p[0] for p in pairs), tuple(p[1] for p in pairs))

    @property
    def pairs(self) -> list[tuple[int, int]]:
        return list(zip(self.states, self.actions))

    def __len__(self) -> int:
        return len(self.states)

    def check(self, mdp: Mdp) -> None:
        if len(self) != mdp.horizon + 1:
            raise ConfigurationError(f"trajectory has {len(self)} steps, horizon {mdp.horizon} needs {mdp.horizon + 1}")
        if min(self.states) < 0 or max(self.states) >= mdp.n_states:
            raise ConfigurationError("trajectory references an unknown state")
        if min(self.actions) < 0 or max(self.actions) >= mdp.n_actions:
            raise ConfigurationError("trajectory references an unknown action")


class ExpectationMethod(str, enum.Enum):
    ENUMERATE = "enumerate"
    VISITATION = "visitation"


class SolveStatus(str, enum.Enum):
    CONVERGED = "converged"
    ITERATION_CAP = "iteration_cap"
    STALLED = "stalled"


@dataclass(frozen=True)
class SolverOptions:
    tolerance: float = 1e-4
    max_iterations: int = 5000
    step_init: float = 0.5
    step_floor: float = 1e-6
    step_growth: float = 1.25
    # Scale of the positive/negative split theta = u - v; u * v stays at scale**2.
    split_scale: float = 0.5
    method: ExpectationMethod = ExpectationMethod.VISITATION
    enumeration_cap: int = DEFAULT_ENUMERATION_CAP


@dataclass(frozen=True)
class MaxEntSolution:
    theta: np.ndarray
    dual_value: float
    grad_norm: float
    iterations: int
    status: SolveStatus
    model_expectation: np.ndarray = field(repr=False)

    @property
    def converged(self) -> bool:
        return self.status is SolveStatus.CONVERGED


def feature_count(traj: Trajectory, feats: FeatureSet) -> np.ndarray:
    """Sum of the binary feature vectors along the trajectory."""
    if feats.k == 0:
        return np.zeros(0)
    return feats.table[list(traj.states), list(traj.actions)].sum(axis=0)


def empirical_feature_expectation(demos: Sequence[Trajectory], feats: FeatureSet) -> np.ndarray:
    """Average feature count, each demo weighted by its empirical frequency."""
    demos = list(demos)
    if not demos:
        raise PreconditionError("empirical feature expectation needs at least one demonstration")
    return np.mean([feature_count(t, feats) for t in demos], axis=0)


def _support(mdp: Mdp) -> tuple[np.ndarray, np.ndarray]:
    """Indicator arrays for the feasible start states and transitions."""
    return (mdp.start > 0).astype(float), (mdp.transition > 0).astype(float)


def trajectory_space_size(mdp: Mdp) -> int:
    return (mdp.n_states * mdp.n_actions) ** (mdp.horizon + 1)


def _check_cap(mdp: Mdp, cap: int, hint: str) -> None:
    size = trajectory_space_size(mdp)
    if size > cap:
        raise CapacityError(f"{size} joint assignments exceed the enumeration cap {cap}; {hint}")


def _forward_backward(mdp: Mdp, log_w: np.ndarray, support) -> tuple[float, np.ndarray]:
    """Log-partition and per-step pair marginals for weights exp(log_w[s, a]).

    Returns ``(log_n, marginals)`` with ``marginals[t, s, a]``.
    """
    start_mask, trans_mask = support
    log_n, marginals = forward_backward(np.ascontiguousarray(log_w, dtype=float), start_mask, trans_mask,
                                        mdp.horizon)
    return float(log_n), marginals


def _enumerate_log_weights(mdp: Mdp, log_w_pair: np.ndarray, cap: int) -> np.ndarray:
    """Unnormalized log-weights over every assignment, shape (S*A,)*(L+1).

    ``log_w_pair[x]`` is the per-step log weight of flat pair x = s*A + a.
    """
    _check_cap(mdp, cap, "use the visitation-frequency method instead")
    start_mask, trans_mask = _support(mdp)
    n_s, n_a = mdp.n_states, mdp.n_actions
    with np.errstate(divide="ignore"):
        log_start = np.repeat(np.log(start_mask), n_a)
        # link[x, y]: log indicator that state(y) is reachable from pair x.
        link = np.log(np.repeat(trans_mask.reshape(n_s * n_a, n_s), n_a, axis=1))
    logw = log_start + log_w_pair
    for _ in range(mdp.horizon):
        logw = logw[..., None] + link + log_w_pair
    return logw


def _enumerated_marginals(logw: np.ndarray) -> tuple[float, np.ndarray]:
    log_n = float(logsumexp(logw))
    prob = np.exp(logw - log_n)
    steps = prob.ndim
    marg = np.stack([prob.sum(axis=tuple(i for i in range(steps) if i != t)) for t in range(steps)])
    return log_n, marg


def log_partition(mdp: Mdp, theta, feats: FeatureSet) -> float:
    """log n(theta) over the feasible trajectory set."""
    theta = np.asarray(theta, dtype=float)
    log_n, _ = _forward_backward(mdp, feats.table @ theta, _support(mdp))
    return log_n


def trajectory_log_prob(traj: Trajectory, theta, mdp: Mdp, feats: FeatureSet,
                        log_z: float | None = None) -> float:
    traj.check(mdp)
    theta = np.asarray(theta, dtype=float)
    if mdp.start[traj.states[0]] <= 0:
        return -np.inf
    for t in range(len(traj) - 1):
        if mdp.transition[traj.states[t], traj.actions[t], traj.states[t + 1]] <= 0:
            return -np.inf
    if log_z is None:
        log_z = log_partition(mdp, theta, feats)
    return float(theta @ feature_count(traj, feats) - log_z)


def trajectory_prob(traj: Trajectory, theta, mdp: Mdp, feats: FeatureSet,
                    log_z: float | None = None) -> float:
    """Pr(T) = exp(theta . f(T)) / n(theta); zero for infeasible T."""
    return float(np.exp(trajectory_log_prob(traj, theta, mdp, feats, log_z)))


def model_feature_expectation(mdp: Mdp, theta, feats: FeatureSet,
                              method: ExpectationMethod | str = ExpectationMethod.VISITATION,
                              cap: int = DEFAULT_ENUMERATION_CAP) -> np.ndarray:
    """Expected feature count under the maximum-entropy trajectory distribution."""
    theta = np.asarray(theta, dtype=float)
    if feats.k == 0:
        return np.zeros(0)
    method = ExpectationMethod(method)
    if method is ExpectationMethod.ENUMERATE:
        log_w = (feats.table @ theta).reshape(-1)
        _, marg = _enumerated_marginals(_enumerate_log_weights(mdp, log_w, cap))
        return marg.sum(axis=0) @ feats.table.reshape(-1, feats.k)
    _, marg = _forward_backward(mdp, feats.table @ theta, _support(mdp))
    return np.einsum("tsa,sak->k", marg, feats.table)


def dual_value(theta, phi_hat, mdp: Mdp, feats: FeatureSet) -> float:
    theta = np.asarray(theta, dtype=float)
    return log_partition(mdp, theta, feats) - float(theta @ np.asarray(phi_hat, dtype=float))


def dual_gradient(theta, phi_hat, mdp: Mdp, feats: FeatureSet,
                  method: ExpectationMethod | str = ExpectationMethod.VISITATION) -> np.ndarray:
    """Model feature expectation minus the target expectation."""
    phi_hat = np.asarray(phi_hat, dtype=float)
    if phi_hat.shape != (feats.k,):
        raise ConfigurationError(f"phi_hat has shape {phi_hat.shape}, expected ({feats.k},)")
    return model_feature_expectation(mdp, theta, feats, method) - phi_hat


class _Dual:
    """Dual objective and gradient sharing one forward-backward pass."""

    def __init__(self, mdp: Mdp, feats: FeatureSet, phi_hat: np.ndarray, opts: SolverOptions):
        self.mdp = mdp
        self.feats = feats
        self.phi_hat = phi_hat
        self.opts = opts
        self.support = _support(mdp)
        self.flat = feats.table.reshape(-1, feats.k)
        if opts.method is ExpectationMethod.ENUMERATE:
            _check_cap(mdp, opts.enumeration_cap, "use the visitation-frequency method instead")

    def __call__(self, theta: np.ndarray) -> tuple[float, np.ndarray]:
        log_w = self.feats.table @ theta
        if self.opts.method is ExpectationMethod.ENUMERATE:
            logw = _enumerate_log_weights(self.mdp, log_w.reshape(-1), self.opts.enumeration_cap)
            log_n, marg = _enumerated_marginals(logw)
            model = marg.sum(axis=0) @ self.flat
        else:
            log_n, marg = _forward_backward(self.mdp, log_w, self.support)
            model = np.einsum("tsa,sak->k", marg, self.feats.table)
        return log_n - float(theta @ self.phi_hat), model


def solve(phi_hat, mdp: Mdp, feats: FeatureSet, opts: SolverOptions | None = None,
          theta0=None) -> MaxEntSolution:
    """Minimize the dual by exponentiated gradient descent.

    theta is split as u - v with u, v > 0 and both halves receive
    multiplicative updates u <- u exp(-eta g), v <- v exp(eta g). The step
    eta halves whenever the dual would increase and grows mildly after each
    accepted step.
    """
    opts = opts or SolverOptions()
    phi_hat = np.asarray(phi_hat, dtype=float)
    if phi_hat.shape != (feats.k,):
        raise ConfigurationError(f"phi_hat has shape {phi_hat.shape}, expected ({feats.k},)")
    upper = mdp.horizon + 1
    if np.any(phi_hat < -1e-12) or np.any(phi_hat > upper + 1e-12) or not np.all(np.isfinite(phi_hat)):
        raise PreconditionError(f"phi_hat {phi_hat} lies outside [0, {upper}]")

    dual = _Dual(mdp, feats, phi_hat, opts)
    theta = np.zeros(feats.k) if theta0 is None else np.asarray(theta0, dtype=float).copy()
    c2 = opts.split_scale ** 2
    u = 0.5 * (theta + np.sqrt(theta * theta + 4 * c2))
    v = u - theta

    value, model = dual(theta)
    if not np.isfinite(value):
        raise DivergenceError("dual is not finite at the initial point", last_theta=theta)
    grad = model - phi_hat
    eta = opts.step_init
    status = SolveStatus.ITERATION_CAP
    it = 0
    for it in range(opts.max_iterations):
        if np.max(np.abs(grad), initial=0.0) <= opts.tolerance:
            status = SolveStatus.CONVERGED
            break
        while True:
            step = np.clip(eta * grad, -50.0, 50.0)
            u_new = u * np.exp(-step)
            v_new = v * np.exp(step)
            theta_new = u_new - v_new
            value_new, model_new = dual(theta_new)
            if not np.isfinite(value_new):
                raise DivergenceError(f"dual became non-finite at iteration {it}", last_theta=theta)
            if value_new <= value:
                break
            eta *= 0.5
            if eta < opts.step_floor:
                break
        if eta < opts.step_floor:
            status = SolveStatus.STALLED
            break
        u, v, theta = u_new, v_new, theta_new
        value, model = value_new, model_new
        grad = model - phi_hat
        eta = min(eta * opts.step_growth, 1e3)
    else:
        it = opts.max_iterations
        if np.max(np.abs(grad), initial=0.0) <= opts.tolerance:
            status = SolveStatus.CONVERGED
    grad_norm = float(np.max(np.abs(grad), initial=0.0))
    if status is not SolveStatus.CONVERGED:
        log.info("maxent solve stopped (%s) after %d iterations, |grad|=%.3g", status.value, it, grad_norm)
    return MaxEntSolution(theta=theta, dual_value=float(value), grad_norm=grad_norm,
                          iterations=it, status=status, model_expectation=model)

"""Comparison learners: hard per-step decoding followed by MaxEnt IRL, and the random attacker."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import maxent
from .em import HiddenMdp, ObservationSequence, log_likelihood_table
from .errors import ConfigurationError, PreconditionError
from .maxent import MaxEntSolution, SolverOptions, Trajectory


@dataclass(frozen=True)
class MltResult:
    trajectories: tuple
    solution: MaxEntSolution

    @property
    def trajectory(self) -> Trajectory:
        return self.trajectories[0]

    @property
    def theta(self) -> np.ndarray:
        return self.solution.theta


def most_likely_trajectory(omega: ObservationSequence, hm: HiddenMdp) -> Trajectory:
    """Pick the highest-likelihood pair at each step on its own.

    Ties go to the lowest flat index (state-major). Dynamics are ignored, so
    the result may be infeasible under the transition kernel.
    """
    table = log_likelihood_table(omega, hm.obs)
    n_a = hm.mdp.n_actions
    flat = table.reshape(table.shape[0], -1)
    best = np.argmax(flat, axis=1)  # argmax returns the first maximum
    return Trajectory(tuple(int(x) // n_a for x in best), tuple(int(x) % n_a for x in best))


def mlt_irl(omega_set: Sequence[ObservationSequence], hm: HiddenMdp,
            opts: SolverOptions | None = None, theta0=None) -> MltResult:
    omega_set = list(omega_set)
    if not omega_set:
        raise PreconditionError("the baseline needs at least one observation sequence")
    decoded = tuple(most_likely_trajectory(omega, hm) for omega in omega_set)
    phi_hat = maxent.empirical_feature_expectation(decoded, hm.feats)
    solution = maxent.solve(phi_hat, hm.mdp, hm.feats, opts, theta0=theta0)
    return MltResult(decoded, solution)


def random_attack(world, rng_seed=None, max_wait: Optional[float] = None) -> float:
    """Attack time drawn uniformly from [0, max_wait] (defaults to the world's setting)."""
    max_wait = world.config.max_wait if max_wait is None else max_wait
    if max_wait < 0:
        raise ConfigurationError("max_wait must be nonnegative")
    if max_wait == 0:
        return 0.0
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    return float(rng.uniform(0.0, max_wait))

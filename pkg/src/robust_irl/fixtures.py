"""Small hidden MDPs whose trajectory space is enumerable, plus noise-free sensing helpers."""
from __future__ import annotations

import numpy as np

from .em import HiddenMdp, ObservationSequence
from .maxent import Trajectory
from .mdp import FeatureSet, Mdp, State
from .observation import EpochObservation, ObservationModel, ObsKind

# Reciprocal-intensity coefficients for the four pairs of the two-state fixture.
_TWO_STATE_CURVES = np.array([
    [[0.0, 0.0, 1.0], [0.5, -0.2, 1.2]],
    [[0.0, 0.0, 2.0], [-0.3, 0.6, 1.8]],
])


def two_state_fixture(horizon: int = 2, sigma: float = 0.1, kind: ObsKind | str = ObsKind.SOUND,
                      view_region=frozenset()) -> HiddenMdp:
    """Two states, two actions ("stay", "switch"), stochastic success 0.8.

    Features: being in state 1, and taking the switch action.
    """
    transition = np.array([
        [[0.8, 0.2], [0.3, 0.7]],
        [[0.1, 0.9], [0.75, 0.25]],
    ])
    mdp = Mdp((State(0), State(1)), ("stay", "switch"), transition, np.array([0.6, 0.4]), horizon)
    table = np.zeros((2, 2, 2))
    table[1, :, 0] = 1.0
    table[:, 1, 1] = 1.0
    feats = FeatureSet(table, ("in_state_1", "switched"))
    obs = ObservationModel(ObsKind(kind), sigma, _TWO_STATE_CURVES, view_region=view_region)
    return HiddenMdp(mdp, feats, obs)


def chain_fixture(horizon: int = 3, sigma: float = 0.1) -> HiddenMdp:
    """Three-state chain with left/right/stay and a sparse kernel (some pairs unreachable)."""
    n = 3
    transition = np.zeros((n, 3, n))
    for s in range(n):
        transition[s, 0, max(s - 1, 0)] += 0.9
        transition[s, 0, s] += 0.1
        transition[s, 1, min(s + 1, n - 1)] += 0.9
        transition[s, 1, s] += 0.1
        transition[s, 2, s] = 1.0
    mdp = Mdp(tuple(State(s) for s in range(n)), ("left", "right", "stay"), transition,
              np.array([1.0, 0.0, 0.0]), horizon)
    table = np.zeros((n, 3, 2))
    table[2, :, 0] = 1.0
    table[:, 2, 1] = 1.0
    feats = FeatureSet(table, ("at_end", "stayed"))
    curves = np.zeros((n, 3, 3))
    for s in range(n):
        for a in range(3):
            curves[s, a] = (0.2 * (a - 1), 0.3 * a, 1.0 + s)
    return HiddenMdp(mdp, feats, ObservationModel(ObsKind.SOUND, sigma, curves))


def noise_free_model(obs: ObservationModel) -> ObservationModel:
    """Vision-only model that reports the true pair with certainty."""
    return obs.replace(kind=ObsKind.VISION, vision_accuracy=1.0,
                       view_region=frozenset(range(obs.n_states)))


def noise_free_sequence(traj: Trajectory) -> ObservationSequence:
    """Observation sequence whose sightings are exactly the trajectory's pairs."""
    blank = EpochObservation((0.0, 0.0, 0.0))
    return ObservationSequence((blank,) * len(traj), tuple(traj.pairs))


def curve_observations(traj: Trajectory, hm: HiddenMdp, sigma: float, seed=None) -> ObservationSequence:
    """Perturb each pair's predicted coefficients with Gaussian noise of scale ``sigma``."""
    rng = np.random.default_rng(seed)
    epochs = []
    for s, a in traj.pairs:
        coeffs = hm.obs.predicted[s, a] + sigma * rng.standard_normal(3)
        epochs.append(EpochObservation(tuple(float(c) for c in coeffs), 0.0, 16))
    return ObservationSequence(tuple(epochs))

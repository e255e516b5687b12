"""Inverse reinforcement learning from noisy, partial observations of an expert."""
from .errors import (CapacityError, ConfigurationError, DegenerateEvidenceError, DivergenceError,
                     PreconditionError, RobustIrlError, SingularityError, ValidationError)
from .mdp import FeatureSet, Heading, Mdp, Norm, State, ile, value_iteration
from .maxent import SolverOptions, Trajectory, solve
from .observation import EpochObservation, MotionSegment, ObservationModel, ObsKind, fit_epoch, predicted_coeffs
from .em import EmOptions, GibbsOptions, HiddenMdp, ObservationSequence, exact_estep, gibbs_estep, robust_irl

__version__ = "0.1.0"

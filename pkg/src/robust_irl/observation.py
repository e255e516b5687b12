"""Continuous-time sound-intensity observations.

A source of strength k moving at constant velocity relative to a fixed
listener has squared range r(t)^2 = a t^2 + b t + c, so its intensity
I(t) = k / r(t)^2 is the reciprocal of a quadratic. Each decision epoch is
summarised by the reciprocal quadratic 1/I(t) = a' t^2 + b' t + c' fitted to
whatever samples arrived during that epoch; k is absorbed into the
coefficients. Per-step likelihoods compare observed and predicted curves on
a fixed time grid.
"""
from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from .errors import ConfigurationError, SingularityError

INTENSITY_FLOOR = 1e-6
CURVE_GRID_POINTS = 16
_SINGULAR_R2 = 1e-12


@dataclass(frozen=True)
class IntensitySample:
    t: float
    intensity: float


@dataclass(frozen=True)
class MotionSegment:
    p0: tuple
    v: tuple
    t0: float = 0.0

    def position(self, t: float) -> np.ndarray:
        return np.asarray(self.p0, float) + np.asarray(self.v, float) * (t - self.t0)


@dataclass(frozen=True)
class EpochObservation:
    """Fitted reciprocal-intensity quadratic for one epoch.

    ``fallback`` names the reduced model used when the samples could not
    support a full quadratic fit ("linear", "constant" or "empty").
    """

    coeffs: tuple
    fit_residual: float = 0.0
    sample_count: int = 0
    fallback: str = ""
    rejected: int = 0
    # Upper triangle (g00, g01, g02, g11, g12, g22) of the inverse Gram matrix of
    # the (t^2, t, 1) design; empty when unknown.
    gram_inv: tuple = ()

    def leverage(self, t) -> np.ndarray:
        """x(t)' (X'X)^-1 x(t): how strongly the fit's noise shows up at time t."""
        if not self.gram_inv:
            return np.full(np.shape(t), 3.0 / max(self.sample_count, 3))
        g00, g01, g02, g11, g12, g22 = self.gram_inv
        g = np.array([[g00, g01, g02], [g01, g11, g12], [g02, g12, g22]])
        t = np.asarray(t, float)
        x = np.stack([t * t, t, np.ones_like(t)], axis=-1)
        return np.einsum("...i,ij,...j->...", x, g, x)

    @property
    def noise_variance(self) -> float:
        """Unbiased per-sample variance estimate from the fit residual."""
        n = self.sample_count
        return self.fit_residual ** 2 * n / (n - 3) if n > 3 else self.fit_residual ** 2

    @property
    def low_rank(self) -> bool:
        return bool(self.fallback)

    def curve(self, t) -> np.ndarray:
        a, b, c = self.coeffs
        t = np.asarray(t, float)
        return (a * t + b) * t + c


def _segment_r2_coeffs(seg: MotionSegment, listener) -> np.ndarray:
    p0 = np.asarray(seg.p0, float)
    v = np.asarray(seg.v, float)
    d = p0 - np.asarray(listener, float)
    return np.array([v @ v, 2.0 * (v @ d), d @ d])


def _min_quadratic(coeffs, duration: float) -> float:
    a, b, c = coeffs
    candidates = [0.0, duration]
    if a > 0:
        vertex = -b / (2 * a)
        if 0.0 < vertex < duration:
            candidates.append(vertex)
    return min((a * t + b) * t + c for t in candidates)


def predicted_coeffs(seg: MotionSegment, listener, k: float = 1.0, duration: float = 1.0) -> tuple:
    """Reciprocal-intensity coefficients (a', b', c') in time elapsed since t0.

    Raises ``SingularityError`` when the range vanishes within ``duration``.
    """
    if k <= 0:
        raise ConfigurationError(f"source strength must be positive, got {k}")
    r2 = _segment_r2_coeffs(seg, listener)
    if _min_quadratic(r2, duration) <= _SINGULAR_R2:
        raise SingularityError("the listener lies on the motion segment")
    return tuple(float(x) for x in r2 / k)


def intensity_at(seg: MotionSegment, listener, k: float, t: float) -> float:
    r = seg.position(t) - np.asarray(listener, float)
    r2 = float(r @ r)
    if r2 <= _SINGULAR_R2:
        raise SingularityError(f"zero range at t={t}")
    return k / r2


def fit_epoch(samples: Sequence[IntensitySample], duration: float = 1.0) -> EpochObservation:
    """Least-squares fit of 1/intensity against (t^2, t, 1).

    Nonpositive intensities are rejected. With fewer than three distinct
    sample times the fit drops to a line or a constant and is flagged; a
    negative curvature or a curve that is not positive over the epoch is
    handled the same way.
    """
    kept = [s for s in samples if s.intensity > 0 and np.isfinite(s.intensity)]
    rejected = len(samples) - len(kept)
    if not kept:
        return EpochObservation((0.0, 0.0, 0.0), 0.0, 0, "empty", rejected)
    t = np.array([s.t for s in kept], float)
    y = 1.0 / np.array([s.intensity for s in kept], float)
    distinct = len(np.unique(t))

    def lstsq(columns):
        design = np.stack(columns, axis=1)
        sol, *_ = np.linalg.lstsq(design, y, rcond=None)
        return sol

    fallback = ""
    coeffs = None
    if distinct >= 3:
        a, b, c = lstsq([t * t, t, np.ones_like(t)])
        if a >= 0 and _min_quadratic((a, b, c), duration) > 0:
            coeffs = (a, b, c)
    if coeffs is None and distinct >= 2:
        b, c = lstsq([t, np.ones_like(t)])
        fallback = "linear"
        if _min_quadratic((0.0, b, c), duration) > 0:
            coeffs = (0.0, b, c)
    if coeffs is None:
        fallback = "constant"
        coeffs = (0.0, 0.0, float(np.mean(y)))
    coeffs = tuple(float(x) for x in coeffs)
    a, b, c = coeffs
    resid = y - ((a * t + b) * t + c)
    rms = float(np.sqrt(np.mean(resid * resid)))
    design = np.stack([t * t, t, np.ones_like(t)], axis=1)
    g = np.linalg.pinv(design.T @ design)
    gram_inv = tuple(float(g[i, j]) for i, j in ((0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)))
    return EpochObservation(coeffs, rms, len(kept), fallback, rejected, gram_inv)


def add_noise(samples: Sequence[IntensitySample], sigma_noise: float, rng_seed=None) -> list[IntensitySample]:
    """Add zero-mean Gaussian noise to every intensity, clamped to a positive floor.

    ``rng_seed`` may be an int or a ``numpy.random.Generator``. The standard
    normal draws do not depend on ``sigma_noise``, so one seed gives paired
    noise realisations across noise levels.
    """
    if sigma_noise < 0:
        raise ConfigurationError(f"noise level must be nonnegative, got {sigma_noise}")
    samples = list(samples)
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    z = rng.standard_normal(len(samples))
    if sigma_noise == 0:
        return samples
    return [IntensitySample(s.t, max(s.intensity + sigma_noise * zi, INTENSITY_FLOOR))
            for s, zi in zip(samples, z)]


class ObsKind(str, enum.Enum):
    SOUND = "sound"
    VISION = "vision"
    FUSED = "fused"


@dataclass(frozen=True, eq=False)
class ObservationModel:
    """Per-step likelihood Pr(o | s, a) over every state-action pair.

    ``predicted[s, a]`` holds the reciprocal-intensity coefficients the pair
    would produce (NaN where the listener sits on the pair's path).
    ``neighbors[x, y]`` marks pairs a noisy sighting of pair x can be
    confused with (flat pair index s * A + a). When ``inflate_by_residual``
    is set, the kernel bandwidth at each grid time widens by the fitted
    curve's standard error there, so poorly supported stretches carry little weight.
    The grid points are strongly correlated (the curve has three free
    coefficients), so the mean squared distance is weighted as if it came
    from ``effective_points`` independent readings.
    """

    kind: ObsKind
    sigma: float
    predicted: np.ndarray
    view_region: frozenset = frozenset()
    listener: tuple = (0.0, 0.0)
    epoch_duration: float = 1.0
    vision_accuracy: float = 0.95
    neighbors: Optional[np.ndarray] = field(default=None, repr=False)
    inflate_by_residual: bool = True
    effective_points: float = 3.0

    def __post_init__(self):
        object.__setattr__(self, "kind", ObsKind(self.kind))
        if not self.sigma > 0:
            raise ConfigurationError(f"likelihood bandwidth must be positive, got {self.sigma}")
        pred = np.array(self.predicted, float)
        if pred.ndim != 3 or pred.shape[2] != 3:
            raise ConfigurationError("predicted coefficients must have shape (S, A, 3)")
        pred.setflags(write=False)
        object.__setattr__(self, "predicted", pred)
        object.__setattr__(self, "view_region", frozenset(int(s) for s in self.view_region))
        if not self.effective_points > 0:
            raise ConfigurationError("effective_points must be positive")
        if not 0.0 <= self.vision_accuracy <= 1.0:
            raise ConfigurationError("vision accuracy must be a probability")
        if self.neighbors is not None:
            nb = np.array(self.neighbors, bool)
            n = pred.shape[0] * pred.shape[1]
            if nb.shape != (n, n):
                raise ConfigurationError(f"neighbor mask must be ({n}, {n})")
            nb.setflags(write=False)
            object.__setattr__(self, "neighbors", nb)
        grid = np.linspace(0.0, self.epoch_duration, CURVE_GRID_POINTS)
        a, b, c = pred[..., 0:1], pred[..., 1:2], pred[..., 2:3]
        object.__setattr__(self, "_grid", grid)
        object.__setattr__(self, "_curves", (a * grid + b) * grid + c)

    @property
    def n_states(self) -> int:
        return self.predicted.shape[0]

    @property
    def n_actions(self) -> int:
        return self.predicted.shape[1]

    def replace(self, **changes) -> "ObservationModel":
        fields = dict(kind=self.kind, sigma=self.sigma, predicted=self.predicted,
                      view_region=self.view_region, listener=self.listener,
                      epoch_duration=self.epoch_duration, vision_accuracy=self.vision_accuracy,
                      neighbors=self.neighbors, inflate_by_residual=self.inflate_by_residual,
                      effective_points=self.effective_points)
        fields.update(changes)
        return ObservationModel(**fields)

    def sound_log_vector(self, o: EpochObservation) -> np.ndarray:
        """Normalized log-likelihood over pairs for one fitted epoch."""
        shape = self.predicted.shape[:2]
        singular = np.isnan(self._curves).any(axis=2)
        if o.sample_count == 0:
            logl = np.where(singular, -np.inf, 0.0)
        else:
            observed = o.curve(self._grid)
            var = self.sigma ** 2
            if self.inflate_by_residual:
                # Widen each grid point by the fitted curve's own uncertainty there,
                # which grows where the fit extrapolates beyond the sampled window.
                var = var + o.noise_variance * o.leverage(self._grid)
            d2 = np.mean((self._curves - observed) ** 2 / var, axis=2)
            logl = np.where(singular, -np.inf, -self.effective_points * np.nan_to_num(d2, nan=0.0) / 2.0)
        logl = logl.reshape(shape)
        return logl - logsumexp(logl)

    def vision_vector(self, sighting) -> np.ndarray:
        """Likelihood over pairs given a sighting ``(s, a)`` or ``None``."""
        n_s, n_a = self.predicted.shape[:2]
        if sighting is None:
            return np.full((n_s, n_a), 1.0 / (n_s * n_a))
        x = int(sighting[0]) * n_a + int(sighting[1])
        lik = np.zeros(n_s * n_a)
        if self.neighbors is None:
            nb = np.ones((n_s * n_a,), bool)
            nb[x] = False
            counts = np.full(n_s * n_a, n_s * n_a - 1)
        else:
            nb = self.neighbors[:, x].copy()
            nb[x] = False
            counts = self.neighbors.sum(axis=1) - self.neighbors.diagonal()
        with np.errstate(divide="ignore", invalid="ignore"):
            lik[nb] = (1.0 - self.vision_accuracy) / counts[nb]
        lik[x] = self.vision_accuracy
        return (lik / lik.sum()).reshape(n_s, n_a)

    def step_log_vector(self, o: Optional[EpochObservation], sighting=None) -> np.ndarray:
        """Log-likelihood over pairs for one epoch under this model's fusion rule."""
        if self.kind is ObsKind.SOUND or (self.kind is ObsKind.FUSED and sighting is None):
            if o is None:
                raise ConfigurationError("a sound observation is required")
            return self.sound_log_vector(o)
        with np.errstate(divide="ignore"):
            return np.log(self.vision_vector(sighting))


def sound_likelihood(o: EpochObservation, s: int, a: int, model: ObservationModel) -> float:
    """Kernel likelihood of the observed curve for pair (s, a), normalized over pairs."""
    return float(np.exp(model.sound_log_vector(o)[s, a]))


def vision_likelihood(sighting, s: int, a: int, model: ObservationModel) -> float:
    """Peaked at the sighted pair when the expert was in view, uniform otherwise."""
    if model.kind is ObsKind.SOUND:
        raise ConfigurationError("vision likelihood needs a vision-only or fused model")
    return float(model.vision_vector(sighting)[s, a])


def fused_likelihood(o: Optional[EpochObservation], sighting, s: int, a: int, model: ObservationModel) -> float:
    """Vision when the expert was in sight this epoch, sound otherwise."""
    if model.kind is not ObsKind.FUSED:
        raise ConfigurationError("fused likelihood needs a fused model")
    return float(np.exp(model.step_log_vector(o, sighting)[s, a]))


GRAM_FIELDS = ("g00", "g01", "g02", "g11", "g12", "g22")
CSV_FIELDS = ("epoch_index", "a", "b", "c", "residual", "sample_count", "fallback", "rejected") + GRAM_FIELDS


def write_epochs_csv(path_or_file, epochs: Iterable[EpochObservation]) -> None:
    def _write(fh):
        writer = csv.writer(fh)
        writer.writerow(CSV_FIELDS)
        for i, o in enumerate(epochs):
            gram = [repr(float(x)) for x in o.gram_inv] or [""] * len(GRAM_FIELDS)
            writer.writerow([i, *(repr(float(x)) for x in o.coeffs), repr(float(o.fit_residual)),
                             o.sample_count, o.fallback, o.rejected, *gram])

    if hasattr(path_or_file, "write"):
        _write(path_or_file)
    else:
        with open(path_or_file, "w", newline="") as fh:
            _write(fh)


def read_epochs_csv(path_or_file) -> list[EpochObservation]:
    def _read(fh):
        rows = list(csv.DictReader(fh))
        rows.sort(key=lambda r: int(r["epoch_index"]))
        out = []
        for r in rows:
            gram = tuple(float(r[k]) for k in GRAM_FIELDS) if r.get("g00") else ()
            out.append(EpochObservation((float(r["a"]), float(r["b"]), float(r["c"])), float(r["residual"]),
                                        int(r["sample_count"]), r.get("fallback") or "", int(r.get("rejected") or 0),
                                        gram))
        return out

    if hasattr(path_or_file, "read"):
        return _read(path_or_file)
    with open(path_or_file, newline="") as fh:
        return _read(fh)

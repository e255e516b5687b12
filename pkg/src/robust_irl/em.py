"""Expectation-maximization over hidden expert trajectories.

The learner sees one observation per decision epoch and treats the expert's
(state, action) pairs as hidden. The E-step computes the posterior feature
expectation

    phi = mean over omega of sum_T Pr(T | omega; theta_t) f(T)

with Pr(T | omega) proportional to Pr(omega | T) Pr(T), where Pr(T) uses the
true dynamics and a Boltzmann policy at the current reward, and Pr(omega | T)
multiplies per-step observation likelihoods. The M-step re-solves the
maximum-entropy dual with phi as the target feature expectation.

This is an approximation. The joint Pr(omega, T) factorizes through the
observation model, but the M-step's trajectory distribution depends on T's
features alone; omega enters only through phi.
"""
from __future__ import annotations

import csv
import enum
import logging
import time
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from . import maxent
from ._gibbs import gibbs_block
from .errors import CapacityError, ConfigurationError, DegenerateEvidenceError, PreconditionError
from .maxent import MaxEntSolution, SolverOptions, Trajectory, trajectory_space_size
from .mdp import FeatureSet, Mdp, boltzmann_policy, reward_table
from .observation import EpochObservation, ObservationModel

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class HiddenMdp:
    mdp: Mdp
    feats: FeatureSet
    obs: ObservationModel

    def __post_init__(self):
        n_s, n_a = self.mdp.n_states, self.mdp.n_actions
        if self.feats.table.shape[:2] != (n_s, n_a):
            raise ConfigurationError("feature table does not match the MDP")
        if self.obs.predicted.shape[:2] != (n_s, n_a):
            raise ConfigurationError("observation model does not match the MDP")

    def with_obs(self, obs: ObservationModel) -> "HiddenMdp":
        return HiddenMdp(self.mdp, self.feats, obs)


@dataclass(frozen=True)
class ObservationSequence:
    """One observation per epoch: a fitted sound curve plus an optional sighting.

    ``sightings[t]`` is the ``(state, action)`` reported by the range finder
    when the expert was in the learner's view, else ``None``.
    """

    epochs: tuple
    sightings: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "epochs", tuple(self.epochs))
        sightings = tuple(self.sightings) or (None,) * len(self.epochs)
        if len(sightings) != len(self.epochs):
            raise ConfigurationError("one sighting slot per epoch required")
        object.__setattr__(self, "sightings", sightings)

    def __len__(self) -> int:
        return len(self.epochs)


def log_likelihood_table(omega: ObservationSequence, obs: ObservationModel) -> np.ndarray:
    """``table[t, s, a] = log Pr(o_t | s, a)``."""
    return np.stack([obs.step_log_vector(o, sighting)
                     for o, sighting in zip(omega.epochs, omega.sightings)])


class EstepMethod(str, enum.Enum):
    EXACT = "exact"
    GIBBS = "gibbs"


@dataclass(frozen=True)
class GibbsOptions:
    epsilon: float = 0.01
    burn_in: int = 500
    thin: int = 5
    block_size: int = 200
    max_sweeps: int = 50_000
    seed: int = 0
    # Nodes redrawn jointly per update; 1 is the per-node blanket update, <= 0 the whole chain.
    span: int = 1

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigurationError("gibbs epsilon must be positive")
        if self.burn_in < 0 or self.thin < 1 or self.block_size < 1 or self.max_sweeps < 1:
            raise ConfigurationError("gibbs burn_in must be >= 0 and thin, block_size, max_sweeps >= 1")


@dataclass(frozen=True)
class PosteriorFeatureExpectation:
    phi: np.ndarray
    method: EstepMethod
    effective_samples: int = 0
    convergence_delta: float = 0.0
    converged: bool = True
    sweeps: int = 0
    # Monte-Carlo standard error of ``phi`` from batch means (zero when exact).
    standard_error: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.standard_error is None:
            object.__setattr__(self, "standard_error", np.zeros_like(self.phi))


def _log_arrays(hm: HiddenMdp, pi: np.ndarray):
    with np.errstate(divide="ignore"):
        return np.log(hm.mdp.start), np.log(hm.mdp.transition), np.log(pi)


def _check_lengths(omega: ObservationSequence, traj: Optional[Trajectory], hm: HiddenMdp) -> None:
    if len(omega) != hm.mdp.horizon + 1:
        raise ConfigurationError(f"observation sequence has {len(omega)} epochs, horizon needs {hm.mdp.horizon + 1}")
    if traj is not None and len(traj) != len(omega):
        raise ConfigurationError("trajectory and observation sequence differ in length")


def traj_log_prior(traj: Trajectory, hm: HiddenMdp, pi) -> float:
    traj.check(hm.mdp)
    log_start, log_trans, log_pi = _log_arrays(hm, np.asarray(pi, float))
    s, a = traj.states, traj.actions
    total = log_start[s[0]] + sum(log_pi[s[t], a[t]] for t in range(len(traj)))
    total += sum(log_trans[s[t], a[t], s[t + 1]] for t in range(len(traj) - 1))
    return float(total)


def traj_prior(traj: Trajectory, hm: HiddenMdp, pi) -> float:
    """Pr(s0) prod_t Pr(a_t | s_t) prod_t Pr(s_{t+1} | s_t, a_t)."""
    return float(np.exp(traj_log_prior(traj, hm, pi)))


def obs_log_given_traj(omega: ObservationSequence, traj: Trajectory, hm: HiddenMdp,
                       table: Optional[np.ndarray] = None) -> float:
    _check_lengths(omega, traj, hm)
    if table is None:
        table = log_likelihood_table(omega, hm.obs)
    return float(sum(table[t, s, a] for t, (s, a) in enumerate(traj.pairs)))


def obs_given_traj(omega: ObservationSequence, traj: Trajectory, hm: HiddenMdp) -> float:
    """prod_t Pr(o_t | s_t, a_t)."""
    return float(np.exp(obs_log_given_traj(omega, traj, hm)))


def log_evidence(omega: ObservationSequence, hm: HiddenMdp, pi, table: Optional[np.ndarray] = None) -> float:
    """log Pr(omega) = log sum_T Pr(omega | T) Pr(T), by the scaled forward recursion."""
    _check_lengths(omega, None, hm)
    if table is None:
        table = log_likelihood_table(omega, hm.obs)
    log_start, _, log_pi = _log_arrays(hm, np.asarray(pi, float))
    trans = hm.mdp.transition
    alpha = log_start[:, None] + log_pi + table[0]
    with np.errstate(divide="ignore"):
        for t in range(1, len(omega)):
            # into[s'] = log sum_{s,a} alpha[s, a] T(s' | s, a), shifted by the running max
            shift = alpha.max()
            if shift == -np.inf:
                return -np.inf
            into = np.log(np.einsum("sa,sat->t", np.exp(alpha - shift), trans)) + shift
            alpha = into[:, None] + log_pi + table[t]
    return float(logsumexp(alpha))


def posterior(traj: Trajectory, omega: ObservationSequence, hm: HiddenMdp, pi) -> float:
    """Pr(T | omega) by Bayes' rule, normalized over every feasible trajectory."""
    table = log_likelihood_table(omega, hm.obs)
    evidence = log_evidence(omega, hm, pi, table)
    if evidence == -np.inf:
        raise DegenerateEvidenceError("no trajectory is consistent with the observations")
    joint = traj_log_prior(traj, hm, pi) + obs_log_given_traj(omega, traj, hm, table)
    return float(np.exp(joint - evidence))


def _posterior_tensor(table: np.ndarray, hm: HiddenMdp, pi: np.ndarray, cap: int) -> np.ndarray:
    """Log joint Pr(omega, T) for every assignment, shape (S*A,)*(L+1)."""
    n_s, n_a = hm.mdp.n_states, hm.mdp.n_actions
    if trajectory_space_size(hm.mdp) > cap:
        raise CapacityError(
            f"{trajectory_space_size(hm.mdp)} joint assignments exceed the enumeration cap {cap}; "
            "use the Gibbs E-step")
    log_start, log_trans, log_pi = _log_arrays(hm, pi)
    step = log_pi.reshape(-1)
    link = np.repeat(log_trans.reshape(n_s * n_a, n_s), n_a, axis=1)
    logw = np.repeat(log_start, n_a) + step + table[0].reshape(-1)
    for t in range(1, table.shape[0]):
        logw = logw[..., None] + link + step + table[t].reshape(-1)
    return logw


def exact_estep(omega_set: Sequence[ObservationSequence], hm: HiddenMdp, pi,
                cap: int = maxent.DEFAULT_ENUMERATION_CAP) -> PosteriorFeatureExpectation:
    """Posterior feature expectation by summing over every trajectory."""
    omega_set = list(omega_set)
    if not omega_set:
        raise PreconditionError("the E-step needs at least one observation sequence")
    pi = np.asarray(pi, float)
    flat_feats = hm.feats.table.reshape(-1, hm.feats.k)
    phi = np.zeros(hm.feats.k)
    for i, omega in enumerate(omega_set):
        _check_lengths(omega, None, hm)
        logw = _posterior_tensor(log_likelihood_table(omega, hm.obs), hm, pi, cap)
        log_z = logsumexp(logw)
        if log_z == -np.inf:
            raise DegenerateEvidenceError(f"observation sequence {i} has zero evidence", omega_index=i)
        prob = np.exp(logw - log_z)
        steps = prob.ndim
        for t in range(steps):
            marg = prob.sum(axis=tuple(j for j in range(steps) if j != t))
            phi += marg @ flat_feats
    return PosteriorFeatureExpectation(phi / len(omega_set), EstepMethod.EXACT)


def _initial_chain(table: np.ndarray, hm: HiddenMdp, log_start, log_trans, log_pi) -> np.ndarray:
    """Per-step argmax of likelihood x policy, repaired to dynamics feasibility.

    The repair is global: among trajectories the dynamics allow, take the one
    with the highest summed per-step score (a max-sum pass over the support).
    When the per-step argmax is already feasible it is returned unchanged.
    """
    n_s, n_a = hm.mdp.n_states, hm.mdp.n_actions
    steps = table.shape[0]
    score = (table + log_pi).reshape(steps, -1)
    allowed_start = np.repeat(log_start > -np.inf, n_a)
    # link[x, y]: pair y's state can follow pair x.
    link = np.repeat((log_trans > -np.inf).reshape(n_s * n_a, n_s), n_a, axis=1)
    best = np.where(allowed_start, score[0], -np.inf)
    back = np.zeros((steps, n_s * n_a), dtype=np.int64)
    for t in range(1, steps):
        cand = np.where(link, best[:, None], -np.inf)
        back[t] = np.argmax(cand, axis=0)
        best = cand[back[t], np.arange(n_s * n_a)] + score[t]
    x = np.empty(steps, dtype=np.int64)
    x[-1] = int(np.argmax(best))
    for t in range(steps - 1, 0, -1):
        x[t - 1] = back[t, x[t]]
    return x


def gibbs_estep(omega_set: Sequence[ObservationSequence], hm: HiddenMdp, pi,
                opts: GibbsOptions = GibbsOptions()) -> PosteriorFeatureExpectation:
    """Posterior feature expectation by Gibbs sampling over hidden pairs.

    Each update redraws ``opts.span`` consecutive (state, action) nodes from
    their conditional given the rest of the chain. One chain per observation sequence; chain i draws its randomness from the
    stream seeded by ``(opts.seed, i)``. After burn-in, samples are taken
    every ``thin`` sweeps in blocks of ``block_size``; sampling stops once the
    running feature expectation moves less than ``epsilon`` (max-norm)
    between consecutive blocks, or when ``max_sweeps`` is reached.
    """
    omega_set = list(omega_set)
    if not omega_set:
        raise PreconditionError("the E-step needs at least one observation sequence")
    pi = np.asarray(pi, float)
    log_start, log_trans, log_pi = _log_arrays(hm, pi)
    flat_feats = np.ascontiguousarray(hm.feats.table.reshape(-1, hm.feats.k))
    k = hm.feats.k
    n_nodes = hm.mdp.horizon + 1

    chains, tables, rngs = [], [], []
    for i, omega in enumerate(omega_set):
        _check_lengths(omega, None, hm)
        table = np.ascontiguousarray(log_likelihood_table(omega, hm.obs))
        if log_evidence(omega, hm, pi, table) == -np.inf:
            raise DegenerateEvidenceError(f"observation sequence {i} has zero evidence", omega_index=i)
        tables.append(table)
        chains.append(_initial_chain(table, hm, log_start, log_trans, log_pi))
        rngs.append(np.random.default_rng([opts.seed, i]))

    feasible = hm.mdp.transition.reshape(-1, hm.mdp.n_states) > 0
    succ_ptr = np.concatenate([[0], np.cumsum(feasible.sum(axis=1))]).astype(np.int64)
    succ_idx = np.nonzero(feasible)[1].astype(np.int64)
    start_states = np.flatnonzero(hm.mdp.start > 0).astype(np.int64)

    span = n_nodes if opts.span <= 0 else min(opts.span, n_nodes)
    per_sweep = -(-n_nodes // span) * (1 + span)

    def run(i, sweeps, accumulate, sums):
        u = rngs[i].random(sweeps * per_sweep)
        return gibbs_block(chains[i], log_start, start_states, log_trans, succ_ptr, succ_idx, log_pi,
                           tables[i], u, span, sweeps, opts.thin, accumulate, flat_feats, sums)

    n_chains = len(omega_set)
    scratch = np.zeros(k)
    for i in range(n_chains):
        run(i, opts.burn_in, False, scratch)
    sweeps = opts.burn_in

    sums = np.zeros((n_chains, k))
    counts = np.zeros(n_chains, dtype=np.int64)
    batch_means: list = []
    block_sweeps = opts.block_size * opts.thin
    previous = None
    delta = np.inf
    converged = False
    while True:
        block = np.zeros((n_chains, k))
        for i in range(n_chains):
            taken = run(i, block_sweeps, True, block[i])
            sums[i] += block[i]
            counts[i] += taken
            block[i] /= max(taken, 1)
        batch_means.append(block)
        sweeps += block_sweeps
        current = np.mean(sums / counts[:, None], axis=0)
        if previous is not None:
            delta = float(np.max(np.abs(current - previous), initial=0.0))
            if delta < opts.epsilon:
                converged = True
                break
        previous = current
        if sweeps + block_sweeps > opts.max_sweeps:
            break
    if not converged:
        log.info("Gibbs E-step stopped at the sweep cap (delta=%.3g)", delta)
    batches = np.stack(batch_means)  # (n_batches, n_chains, k)
    if len(batches) > 1:
        per_chain_var = batches.var(axis=0, ddof=1) / len(batches)
        se = np.sqrt(per_chain_var.sum(axis=0)) / n_chains
    else:
        se = np.full(k, np.inf)
    return PosteriorFeatureExpectation(current, EstepMethod.GIBBS, int(counts.sum()), delta, converged, sweeps, se)


def mstep(phi: PosteriorFeatureExpectation | np.ndarray, hm: HiddenMdp,
          opts: SolverOptions | None = None, theta0=None) -> MaxEntSolution:
    """Solve the maximum-entropy dual with the posterior expectation as target."""
    target = phi.phi if isinstance(phi, PosteriorFeatureExpectation) else np.asarray(phi, float)
    return maxent.solve(target, hm.mdp, hm.feats, opts, theta0=theta0)


@dataclass(frozen=True)
class EmOptions:
    seed: int = 0
    em_epsilon: float = 0.01
    max_iterations: int = 100
    beta: float = 5.0
    estep: str = "auto"
    enumeration_cap: int = maxent.DEFAULT_ENUMERATION_CAP
    gibbs: GibbsOptions = GibbsOptions()
    solver: SolverOptions = SolverOptions()
    ll_tolerance: float = 1e-6
    se_multiplier: float = 2.0


@dataclass(frozen=True)
class EmRecord:
    iteration: int
    theta: np.ndarray
    phi: np.ndarray
    dual_value: float
    estep_method: EstepMethod
    estep_converged: bool
    mstep_status: str
    log_likelihood: float
    timestamp: float


@dataclass
class EmTrace:
    """Append-only per-iteration log of an EM run."""

    records: list = field(default_factory=list)
    converged: bool = False
    ll_decreases: int = 0

    def append(self, record: EmRecord) -> None:
        if self.records and record.timestamp < self.records[-1].timestamp:
            raise ValueError("trace timestamps must be monotone")
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def iterations(self) -> int:
        return len(self.records)

    def to_csv(self, path_or_file, header_comment: str = "") -> None:
        def _write(fh):
            if header_comment:
                fh.write(f"# {header_comment}\n")
            if not self.records:
                return
            k = len(self.records[0].theta)
            writer = csv.writer(fh)
            writer.writerow(["iteration", *(f"theta_{j}" for j in range(k)), *(f"phi_{j}" for j in range(k)),
                             "dual_value", "estep_method", "converged"])
            for i, r in enumerate(self.records):
                last = i == len(self.records) - 1
                writer.writerow([r.iteration, *map(repr, map(float, r.theta)), *map(repr, map(float, r.phi)),
                                 repr(float(r.dual_value)), r.estep_method.value,
                                 int(self.converged and last)])

        if hasattr(path_or_file, "write"):
            _write(path_or_file)
        else:
            with open(path_or_file, "w", newline="") as fh:
                _write(fh)


@dataclass(frozen=True)
class EmResult:
    theta: np.ndarray
    policy: np.ndarray
    trace: EmTrace
    solution: MaxEntSolution

    @property
    def model_expectation(self) -> np.ndarray:
        return self.solution.model_expectation


def choose_estep(hm: HiddenMdp, opts: EmOptions) -> EstepMethod:
    if opts.estep != "auto":
        return EstepMethod(opts.estep)
    if trajectory_space_size(hm.mdp) <= opts.enumeration_cap:
        return EstepMethod.EXACT
    return EstepMethod.GIBBS


def robust_irl(omega_set: Sequence[ObservationSequence], hm: HiddenMdp,
               opts: EmOptions = EmOptions()) -> EmResult:
    """Learn reward weights from observation sequences by EM."""
    omega_set = list(omega_set)
    if not omega_set:
        raise PreconditionError("robust IRL needs at least one observation sequence")
    tables = [log_likelihood_table(omega, hm.obs) for omega in omega_set]
    method = choose_estep(hm, opts)
    rng = np.random.default_rng(opts.seed)
    theta = rng.uniform(-1.0, 1.0, size=hm.feats.k)
    pi = boltzmann_policy(hm.mdp, reward_table(theta, hm.feats), opts.beta)

    trace = EmTrace()
    previous = None
    previous_ll = None
    solution = None
    for it in range(1, opts.max_iterations + 1):
        ll = float(np.mean([log_evidence(o, hm, pi, tb) for o, tb in zip(omega_set, tables)]))
        if ll == -np.inf:
            bad = next(i for i, (o, tb) in enumerate(zip(omega_set, tables))
                       if log_evidence(o, hm, pi, tb) == -np.inf)
            raise DegenerateEvidenceError(f"observation sequence {bad} has zero evidence", omega_index=bad)
        if previous_ll is not None and ll < previous_ll - opts.ll_tolerance:
            trace.ll_decreases += 1
            log.info("observed-data log-likelihood fell from %.6g to %.6g at iteration %d", previous_ll, ll, it)
        previous_ll = ll

        if method is EstepMethod.EXACT:
            estep = exact_estep(omega_set, hm, pi, opts.enumeration_cap)
        else:
            estep = gibbs_estep(omega_set, hm, pi, opts.gibbs)
        solution = mstep(estep, hm, opts.solver, theta0=theta)
        theta = solution.theta
        pi = boltzmann_policy(hm.mdp, reward_table(theta, hm.feats), opts.beta)
        trace.append(EmRecord(it, theta.copy(), estep.phi.copy(), solution.dual_value, estep.method,
                              estep.converged, solution.status.value, ll, time.monotonic()))
        if previous is not None:
            change = np.abs(estep.phi - previous.phi)
            # A sampled E-step cannot resolve moves smaller than its own error.
            noise = opts.se_multiplier * np.hypot(estep.standard_error, previous.standard_error)
            if np.all((change < opts.em_epsilon) | (change <= noise)):
                trace.converged = True
                break
        previous = estep
    return EmResult(theta, pi, trace, solution)

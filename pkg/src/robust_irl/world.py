"""Gridworld domains, expert simulation, sensing, and penetration trials.

Two domains share one construction. A drone flies a one-cell-wide corridor
(two headings; forward, turn around, hover). A patroller walks an L-shaped
hallway (four headings; forward, turn 90 degrees left, no-op). In both, the
intended action's effect happens with probability ``success`` and the
remainder is split evenly over the other two actions' effects; blocked moves
stay in place.

The emitter keeps to the right-hand side of its cell (``lane_offset``
metres from the centre), so heading changes move the sound source and every
(state, action) pair traces a distinct curve at the listener.

World configs are plain text: ``key = value`` lines followed by a ``[grid]``
block. Grid legend: ``#`` wall, ``.`` free, ``P`` patroller start, ``L`` listener
(learner) start, ``r`` room cell and ``G`` goal. The expert walks ``.`` and
``P`` cells only; ``L``, ``r`` and ``G`` belong to the learner.
"""
from __future__ import annotations

import csv
import enum
import math
import os
from collections import deque
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .baselines import random_attack
from .em import HiddenMdp, ObservationSequence
from .errors import ConfigurationError, SingularityError
from .maxent import Trajectory
from .mdp import FeatureSet, Heading, Mdp, State
from .observation import (EpochObservation, IntensitySample, MotionSegment, ObservationModel, ObsKind,
                          add_noise, fit_epoch, predicted_coeffs, write_epochs_csv)

WORLDS_DIR = Path(__file__).with_name("worlds")
ENV_PREFIX = "ROBUST_IRL_"


class Domain(str, enum.Enum):
    DRONE = "drone"
    PATROL = "patrol"


class TrialOutcome(str, enum.Enum):
    SUCCESS = "success"
    SPOTTED = "spotted"
    TIMEOUT = "timeout"


@dataclass(frozen=True)
class WorldConfig:
    grid: tuple
    domain: Domain = Domain.DRONE
    name: str = "world"
    cell_size: float = 1.0
    listener_pos: Optional[tuple] = None
    source_strength: float = 1.0
    lane_offset: float = 0.25
    epoch_duration: float = 1.0
    samples_per_second: float = 20.0
    sample_window_min_fraction: float = 0.3
    intensity_ceiling: float = 1e3
    horizon: int = 19
    n_demos: int = 4
    discount: float = 0.95
    success: float = 0.9
    theta_true: tuple = (1.0, -0.1)
    beta: float = 5.0
    obs_sigma: float = 0.1
    view_range: float = 3.0
    view_half_angle: float = 45.0
    learner_heading: Heading = Heading.N
    patroller_heading: Heading = Heading.E
    epoch_budget: int = 200
    risk: float = 0.05
    max_wait: float = 60.0

    def __post_init__(self):
        object.__setattr__(self, "grid", tuple(self.grid))
        object.__setattr__(self, "domain", Domain(self.domain))
        object.__setattr__(self, "learner_heading", _heading(self.learner_heading))
        object.__setattr__(self, "patroller_heading", _heading(self.patroller_heading))
        object.__setattr__(self, "theta_true", tuple(float(x) for x in self.theta_true))
        if self.listener_pos is not None:
            object.__setattr__(self, "listener_pos", tuple(float(x) for x in self.listener_pos))
        if not self.grid or len({len(row) for row in self.grid}) != 1:
            raise ConfigurationError("grid rows must be nonempty and of equal width")
        bad = set("".join(self.grid)) - set("#.GLPr")
        if bad:
            raise ConfigurationError(f"unknown grid symbols {sorted(bad)}")
        if not 0.0 < self.sample_window_min_fraction <= 1.0:
            raise ConfigurationError("sample_window_min_fraction must lie in (0, 1]")
        if not 0.0 < self.success <= 1.0:
            raise ConfigurationError("success probability must lie in (0, 1]")
        if self.domain is Domain.PATROL and "G" not in "".join(self.grid):
            raise ConfigurationError("a patrol world needs a goal cell")


def _heading(value) -> Heading:
    if isinstance(value, Heading):
        return value
    if isinstance(value, str) and not value.isdigit():
        return Heading[value.strip().upper()]
    return Heading(int(value))


_FIELD_TYPES = {f.name: f.type for f in fields(WorldConfig)}


def _coerce(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    raw = raw.strip()
    if key in ("listener_pos", "theta_true"):
        return tuple(float(x) for x in raw.replace("(", "").replace(")", "").split(","))
    if key in ("learner_heading", "patroller_heading"):
        return _heading(raw)
    if key == "domain":
        return Domain(raw)
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def parse_world_config(text: str, env: Optional[dict] = None) -> WorldConfig:
    """Parse ``key = value`` lines and a ``[grid]`` block.

    Environment variables named ``ROBUST_IRL_<KEY>`` override file values.
    """
    values: dict = {}
    grid: list = []
    in_grid = False
    for line_no, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if in_grid:
            if stripped:
                grid.append(stripped)
            continue
        if not stripped or stripped.startswith("#"):
            continue
        if stripped.lower() == "[grid]":
            in_grid = True
            continue
        if "=" not in stripped:
            raise ConfigurationError(f"line {line_no}: expected key = value")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in _FIELD_TYPES or key == "grid":
            raise ConfigurationError(f"line {line_no}: unknown key {key!r}")
        values[key] = _coerce(key, raw)
    env = os.environ if env is None else env
    for key in _FIELD_TYPES:
        if key != "grid" and ENV_PREFIX + key.upper() in env:
            values[key] = _coerce(key, env[ENV_PREFIX + key.upper()])
    if not grid:
        raise ConfigurationError("config has no [grid] block")
    return WorldConfig(grid=tuple(grid), **values)


def load_world_config(path_or_name, env: Optional[dict] = None) -> WorldConfig:
    """Load a config file, or a bundled world by name (``drone``, ``patrol``)."""
    path = Path(path_or_name)
    if not path.exists():
        bundled = WORLDS_DIR / f"{path_or_name}.cfg"
        if not bundled.exists():
            raise ConfigurationError(f"no world config at {path_or_name}")
        path = bundled
    return parse_world_config(path.read_text(), env)


DRONE_ACTIONS = ("forward", "turn_around", "hover")
PATROL_ACTIONS = ("forward", "turn_left", "noop")
FEATURE_NAMES = ("moved_forward", "turned")
FORWARD, TURN, STAY = 0, 1, 2


@dataclass(frozen=True, eq=False)
class World:
    """A built domain: the expert's hidden MDP plus the geometry behind it."""

    config: WorldConfig
    hm: HiddenMdp
    theta_true: np.ndarray
    cells: tuple                 # expert-accessible (row, col) cells, indexed by State.cell
    headings: tuple
    effects: np.ndarray          # effects[s, a] = successor state of the intended action
    poses: np.ndarray            # poses[s] = emitter position in metres
    listener: tuple
    learner_view: frozenset      # states visible to the hidden learner

    @property
    def mdp(self) -> Mdp:
        return self.hm.mdp

    @property
    def feats(self) -> FeatureSet:
        return self.hm.feats

    def state_index(self, cell: tuple, heading: Heading) -> int:
        return self.cells.index(tuple(cell)) * len(self.headings) + self.headings.index(heading)

    def segment(self, s: int, a: int, t0: float = 0.0) -> MotionSegment:
        start = self.poses[s]
        end = self.poses[self.effects[s, a]]
        velocity = (end - start) / self.config.epoch_duration
        return MotionSegment(tuple(start), tuple(velocity), t0)

    def observation_model(self, kind: ObsKind | str, sigma: Optional[float] = None) -> ObservationModel:
        kind = ObsKind(kind)
        view = self.learner_view if kind is not ObsKind.SOUND else frozenset()
        return self.hm.obs.replace(kind=kind, view_region=view,
                                   sigma=self.config.obs_sigma if sigma is None else sigma)

    def with_model(self, kind: ObsKind | str, sigma: Optional[float] = None) -> HiddenMdp:
        return self.hm.with_obs(self.observation_model(kind, sigma))


def _cell_center(cell, size: float) -> np.ndarray:
    return np.array([(cell[1] + 0.5) * size, (cell[0] + 0.5) * size])


def _right_of(h: Heading) -> np.ndarray:
    dr, dc = h.vector
    # (x, y) with y growing downward; right-hand normal of (dc, dr) is (-dr, dc).
    return np.array([-dr, dc], float)


def line_of_sight(grid: Sequence[str], a: tuple, b: tuple) -> bool:
    """True when the straight segment between cell centres crosses no wall."""
    (r0, c0), (r1, c1) = a, b
    n = max(abs(r1 - r0), abs(c1 - c0)) * 8 + 1
    for i in range(n + 1):
        f = i / n
        r = r0 + 0.5 + (r1 - r0) * f
        c = c0 + 0.5 + (c1 - c0) * f
        # Points exactly on a grid line touch two cells; require either to be open.
        rows = {math.floor(r - 1e-9), math.floor(r + 1e-9)}
        cols = {math.floor(c - 1e-9), math.floor(c + 1e-9)}
        if all(grid[rr][cc] == "#" for rr in rows for cc in cols):
            return False
    return True


def in_view(grid: Sequence[str], origin: tuple, heading: Heading, target: tuple,
            view_range: float, half_angle: float) -> bool:
    """Forward view cone with range (cells) and half-angle (degrees), walls occlude."""
    if tuple(origin) == tuple(target):
        return True
    dr, dc = target[0] - origin[0], target[1] - origin[1]
    dist = math.hypot(dr, dc)
    if dist > view_range + 1e-9:
        return False
    hr, hc = heading.vector
    cos = (dr * hr + dc * hc) / dist
    if cos < math.cos(math.radians(half_angle)) - 1e-9:
        return False
    return line_of_sight(grid, origin, target)


def _find(grid, symbol) -> list:
    return [(r, c) for r, row in enumerate(grid) for c, ch in enumerate(row) if ch == symbol]


def build_world(cfg: WorldConfig) -> World:
    grid = cfg.grid
    cells = tuple((r, c) for r, row in enumerate(grid) for c, ch in enumerate(row) if ch in ".P")
    if not cells:
        raise ConfigurationError("the layout has no cells for the expert")
    if cfg.domain is Domain.DRONE:
        rows = {r for r, _ in cells}
        if len(rows) != 1:
            raise ConfigurationError("the drone corridor must be a single row of free cells")
        headings = (Heading.E, Heading.W)
        actions = DRONE_ACTIONS
        turn_quarters = 2
    else:
        headings = (Heading.N, Heading.E, Heading.S, Heading.W)
        actions = PATROL_ACTIONS
        turn_quarters = -1
    cell_index = {cell: i for i, cell in enumerate(cells)}
    n_h = len(headings)
    states = [State(i, h) for i in range(len(cells)) for h in headings]
    n_s, n_a = len(states), len(actions)

    effects = np.empty((n_s, n_a), dtype=np.int64)
    for s, st in enumerate(states):
        r, c = cells[st.cell]
        dr, dc = st.orientation.vector
        ahead = cell_index.get((r + dr, c + dc))
        effects[s, FORWARD] = s if ahead is None else ahead * n_h + headings.index(st.orientation)
        effects[s, TURN] = st.cell * n_h + headings.index(st.orientation.rotated(turn_quarters))
        effects[s, STAY] = s

    transition = np.zeros((n_s, n_a, n_s))
    slip = (1.0 - cfg.success) / (n_a - 1)
    for s in range(n_s):
        for a in range(n_a):
            for b in range(n_a):
                transition[s, a, effects[s, b]] += cfg.success if a == b else slip

    table = np.zeros((n_s, n_a, 2))
    for s in range(n_s):
        table[s, FORWARD, 0] = float(effects[s, FORWARD] != s)
        table[s, TURN, 1] = 1.0

    mdp = Mdp(states, actions, transition, np.full(n_s, 1.0 / n_s), cfg.horizon, cfg.discount)
    feats = FeatureSet(table, FEATURE_NAMES)

    listener_cells = _find(grid, "L")
    if cfg.listener_pos is not None:
        listener = np.asarray(cfg.listener_pos, float)
    elif listener_cells:
        listener = _cell_center(listener_cells[0], cfg.cell_size)
    else:
        raise ConfigurationError("no listener position: set listener_pos or mark an L cell")
    lr, lc = int(listener[1] // cfg.cell_size), int(listener[0] // cfg.cell_size)
    if not (0 <= lr < len(grid) and 0 <= lc < len(grid[0])) or grid[lr][lc] == "#":
        raise ConfigurationError("the listener must sit in a free cell")

    poses = np.array([_cell_center(cells[st.cell], cfg.cell_size) + cfg.lane_offset * _right_of(st.orientation)
                      for st in states])
    predicted = np.full((n_s, n_a, 3), np.nan)
    for s in range(n_s):
        for a in range(n_a):
            start = poses[s]
            seg = MotionSegment(tuple(start), tuple((poses[effects[s, a]] - start) / cfg.epoch_duration))
            try:
                predicted[s, a] = predicted_coeffs(seg, listener, cfg.source_strength, cfg.epoch_duration)
            except SingularityError:
                pass

    # Pairs a noisy sighting can be confused with: same or adjacent cell.
    pair_cells = np.repeat([cells[st.cell] for st in states], n_a, axis=0)
    gap = np.abs(pair_cells[:, None, :] - pair_cells[None, :, :]).sum(axis=2)
    neighbors = gap <= 1

    learner_view = frozenset()
    if listener_cells:
        origin = listener_cells[0]
        learner_view = frozenset(s for s, st in enumerate(states)
                                 if in_view(grid, origin, cfg.learner_heading, cells[st.cell],
                                            cfg.view_range, cfg.view_half_angle))
    kind = ObsKind.SOUND if cfg.domain is Domain.DRONE else ObsKind.FUSED
    obs = ObservationModel(kind, cfg.obs_sigma, predicted,
                           view_region=learner_view if kind is not ObsKind.SOUND else frozenset(),
                           listener=tuple(listener), epoch_duration=cfg.epoch_duration,
                           neighbors=neighbors)
    hm = HiddenMdp(mdp, feats, obs)
    return World(cfg, hm, np.array(cfg.theta_true), cells, headings, effects, poses,
                 tuple(listener), learner_view)


def build_drone_domain(cfg: WorldConfig) -> tuple[HiddenMdp, np.ndarray]:
    if cfg.domain is not Domain.DRONE:
        raise ConfigurationError("expected a drone corridor config")
    world = build_world(cfg)
    return world.hm, world.theta_true


def build_patrol_domain(cfg: WorldConfig) -> tuple[HiddenMdp, np.ndarray]:
    if cfg.domain is not Domain.PATROL:
        raise ConfigurationError("expected a patrol config")
    world = build_world(cfg)
    return world.hm, world.theta_true


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def simulate_expert(hm: HiddenMdp, pi, horizon: int, seed=None) -> Trajectory:
    """Roll out L + 1 steps: actions from ``pi``, successors from the kernel."""
    rng = _rng(seed)
    mdp = hm.mdp
    pi = np.asarray(pi, float)
    cum_pi = np.cumsum(pi, axis=1)
    cum_t = np.cumsum(mdp.transition, axis=2)
    s = int(np.searchsorted(np.cumsum(mdp.start), rng.random(), side="right"))
    states, actions = [], []
    for t in range(horizon + 1):
        a = min(int(np.searchsorted(cum_pi[s], rng.random(), side="right")), mdp.n_actions - 1)
        states.append(s)
        actions.append(a)
        if t < horizon:
            s = min(int(np.searchsorted(cum_t[s, a], rng.random(), side="right")), mdp.n_states - 1)
    return Trajectory(tuple(states), tuple(actions))


def expert_policy(world: World) -> np.ndarray:
    from .mdp import boltzmann_policy, reward_table
    return boltzmann_policy(world.mdp, reward_table(world.theta_true, world.feats), world.config.beta)


def _sample_times(rng: np.random.Generator, cfg: WorldConfig, full_window: bool) -> np.ndarray:
    d = cfg.epoch_duration
    if full_window:
        w0, width = 0.0, d
    else:
        min_w = cfg.sample_window_min_fraction * d
        w0 = rng.uniform(0.0, d - min_w)
        width = rng.uniform(min_w, d - w0)
    dt = 1.0 / cfg.samples_per_second
    n = max(int(math.floor(width / dt + 1e-9)), 1)
    return w0 + (np.arange(n) + 0.5) * (width / n)


def generate_observations(traj: Trajectory, world: World, sigma_noise: float, seed=None,
                          full_window: bool = False) -> ObservationSequence:
    """Sense a trajectory: sampled intensities per epoch, noise, curve fit, sightings.

    Each epoch's curve follows the intended action's motion from the current
    pose. Sightings are recorded when the expert is inside the learner's view:
    the true pair with probability ``vision_accuracy``, else a uniformly drawn
    neighbouring pair. The random stream does not depend on ``sigma_noise``.
    """
    rng = _rng(seed)
    cfg = world.config
    obs = world.hm.obs
    n_a = world.mdp.n_actions
    epochs, sightings = [], []
    for s, a in traj.pairs:
        times = _sample_times(rng, cfg, full_window)
        seg = world.segment(s, a)
        samples = []
        for t in times:
            r = seg.position(t) - np.asarray(world.listener)
            r2 = float(r @ r)
            value = cfg.intensity_ceiling if r2 <= 1e-12 else min(cfg.source_strength / r2, cfg.intensity_ceiling)
            samples.append(IntensitySample(float(t), value))
        samples = add_noise(samples, sigma_noise, rng)
        epochs.append(fit_epoch(samples, cfg.epoch_duration))

        u_correct, u_pick = rng.random(2)
        sighting = None
        if s in world.learner_view:
            if u_correct < obs.vision_accuracy:
                sighting = (s, a)
            else:
                x = s * n_a + a
                cand = np.flatnonzero(obs.neighbors[x]) if obs.neighbors is not None else np.arange(obs.n_states * n_a)
                cand = cand[cand != x]
                y = int(cand[min(int(u_pick * len(cand)), len(cand) - 1)]) if len(cand) else x
                sighting = divmod(y, n_a)
        sightings.append(sighting)
    return ObservationSequence(tuple(epochs), tuple(sightings))


@dataclass(frozen=True)
class Episode:
    true_trajectory: Trajectory
    omega: ObservationSequence
    seed: int


def write_episode_csv(path, episode: Episode) -> None:
    """Trajectory rows followed by one observation row per epoch."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# seed={episode.seed}\n")
        writer = csv.writer(fh)
        writer.writerow(["kind", "step", "state", "action"])
        for t, (s, a) in enumerate(episode.true_trajectory.pairs):
            writer.writerow(["trajectory", t, s, a])
        writer.writerow(["sighting", "step", "state", "action"])
        for t, sighting in enumerate(episode.omega.sightings):
            if sighting is not None:
                writer.writerow(["sighting", t, sighting[0], sighting[1]])
        write_epochs_csv(fh, episode.omega.epochs)


# ---------------------------------------------------------------- penetration

@dataclass(frozen=True)
class PlannerOptions:
    risk: float = 0.05
    epoch_budget: int = 200


@dataclass(frozen=True)
class TrialResult:
    outcome: TrialOutcome
    epochs: int
    waited: int


class _Arena:
    """Learner-side geometry shared by every trial in one world."""

    def __init__(self, world: World):
        self.world = world
        grid = world.config.grid
        self.walk = [(r, c) for r, row in enumerate(grid) for c, ch in enumerate(row) if ch != "#"]
        self.walk_index = {cell: i for i, cell in enumerate(self.walk)}
        starts, goals = _find(grid, "L"), _find(grid, "G")
        if not starts or not goals:
            raise ConfigurationError("a penetration world needs L and G cells")
        self.start = self.walk_index[starts[0]]
        self.goal = self.walk_index[goals[0]]
        self.moves = []
        for (r, c) in self.walk:
            nxt = [self.walk_index[(r, c)]]
            for dr, dc in ((-1, 0), (0, 1), (1, 0), (0, -1)):
                j = self.walk_index.get((r + dr, c + dc))
                if j is not None:
                    nxt.append(j)
            self.moves.append(sorted(nxt))
        cfg = world.config
        # sees[s, j]: patroller in state s sees walkable cell j.
        self.sees = np.zeros((world.mdp.n_states, len(self.walk)))
        for s, st in enumerate(world.mdp.states):
            origin = world.cells[st.cell]
            for j, cell in enumerate(self.walk):
                self.sees[s, j] = in_view(grid, origin, st.orientation, cell, cfg.view_range, cfg.view_half_angle)
        # spots[j, s]: the learner in walkable cell j sees a patroller in state s.
        self.spots = np.zeros((len(self.walk), world.mdp.n_states), dtype=bool)
        for j, cell in enumerate(self.walk):
            for s, st in enumerate(world.mdp.states):
                self.spots[j, s] = in_view(grid, cell, cfg.learner_heading, world.cells[st.cell],
                                           cfg.view_range, cfg.view_half_angle)
        self.shortest = self._shortest_path()
        self.dist = self._distances()

    def _shortest_path(self) -> list:
        prev = {self.start: None}
        queue = deque([self.start])
        while queue:
            i = queue.popleft()
            if i == self.goal:
                break
            for j in self.moves[i]:
                if j not in prev:
                    prev[j] = i
                    queue.append(j)
        if self.goal not in prev:
            raise ConfigurationError("the goal is unreachable from the learner's start")
        path = [self.goal]
        while prev[path[-1]] is not None:
            path.append(prev[path[-1]])
        return path[::-1]

    def _distances(self) -> np.ndarray:
        dist = np.full(len(self.walk), np.inf)
        dist[self.goal] = 0
        queue = deque([self.goal])
        while queue:
            i = queue.popleft()
            for j in self.moves[i]:
                if dist[j] == np.inf:
                    dist[j] = dist[i] + 1
                    queue.append(j)
        return dist

    def step_matrix(self, policy: np.ndarray) -> np.ndarray:
        return np.einsum("sa,sat->st", policy, self.world.mdp.transition)

    def next_cell(self, learner: int, belief: np.ndarray, step: np.ndarray, opts: PlannerOptions) -> int:
        """Closest-to-goal neighbour (or the current cell) whose predicted next-step risk is below the threshold.

        Risk counts the patroller's view now and after its predicted move. With
        no cell under the threshold the least risky one is taken.
        """
        options = self.moves[learner]
        risk = np.maximum(belief @ self.sees, (belief @ step) @ self.sees)[options]
        safe = [j for j, r in zip(options, risk) if r < opts.risk]
        if safe:
            return min(safe, key=lambda j: (self.dist[j], j != learner, j))
        return options[int(np.argmin(risk))]

    def observe(self, belief: np.ndarray, learner: int, patroller: Optional[int]) -> np.ndarray:
        """Condition a belief over patroller states on what the learner sees from its cell."""
        visible = self.spots[learner]
        if patroller is not None and visible[patroller]:
            out = np.zeros_like(belief)
            out[patroller] = 1.0
            return out
        out = np.where(visible, 0.0, belief)
        total = out.sum()
        if total <= 0:
            out = (~visible).astype(float)
            total = out.sum()
        return out / total


_ARENAS: dict = {}


def _arena(world: World) -> _Arena:
    key = id(world)
    if key not in _ARENAS or _ARENAS[key].world is not world:
        _ARENAS[key] = _Arena(world)
    return _ARENAS[key]


def _patroller_start(world: World) -> Optional[int]:
    marks = _find(world.config.grid, "P")
    if not marks:
        return None
    return world.state_index(marks[0], world.config.patroller_heading)


def _spotted(arena: _Arena, patroller: Optional[int], previous: Optional[int], learner: int) -> bool:
    if patroller is None:
        return False
    if arena.sees[patroller, learner]:
        return True
    return previous is not None and bool(arena.sees[previous, learner])


def _run_trial(world: World, seed, choose_step, opts: PlannerOptions) -> TrialResult:
    """Advance learner and patroller one epoch at a time.

    ``choose_step(epoch, patroller, learner)`` returns the learner's next
    cell (its current cell to wait).
    """
    arena = _arena(world)
    rng = _rng(seed)
    patroller = _patroller_start(world)
    true_pi = expert_policy(world)
    cum_pi = np.cumsum(true_pi, axis=1)
    cum_t = np.cumsum(world.mdp.transition, axis=2)
    learner = arena.start
    if _spotted(arena, patroller, None, learner):
        return TrialResult(TrialOutcome.SPOTTED, 0, 0)
    waited = 0
    for epoch in range(1, opts.epoch_budget + 1):
        nxt = choose_step(epoch - 1, patroller, learner)
        if nxt == learner:
            waited += 1
        learner = nxt
        previous = patroller
        if patroller is not None:
            u = rng.random(2)
            a = min(int(np.searchsorted(cum_pi[patroller], u[0], side="right")), world.mdp.n_actions - 1)
            patroller = min(int(np.searchsorted(cum_t[patroller, a], u[1], side="right")), world.mdp.n_states - 1)
        if _spotted(arena, patroller, previous, learner):
            return TrialResult(TrialOutcome.SPOTTED, epoch, waited)
        if learner == arena.goal:
            return TrialResult(TrialOutcome.SUCCESS, epoch, waited)
    return TrialResult(TrialOutcome.TIMEOUT, opts.epoch_budget, waited)


def planner_options(world: World) -> PlannerOptions:
    cfg = world.config
    return PlannerOptions(cfg.risk, cfg.epoch_budget)


def penetration_trial(world: World, learned_policy, planner_opts: Optional[PlannerOptions] = None,
                      seed=None) -> TrialResult:
    """Wait hidden until a safe path to the goal is predicted, then take it.

    The learner tracks a belief over the patroller's state: it starts
    uniform, is pushed forward each epoch through ``learned_policy`` and the
    known dynamics, collapses on a sighting, and otherwise rules out the
    states the learner can see. The learner steps toward the goal only when
    that step's predicted spotting probability is below ``risk``; otherwise it
    waits, or backs off if waiting is unsafe too.
    """
    if world.config.domain is not Domain.PATROL:
        raise ConfigurationError("penetration trials need a patrol world")
    opts = planner_opts or planner_options(world)
    arena = _arena(world)
    step = arena.step_matrix(np.asarray(learned_policy, float))
    n_s = world.mdp.n_states
    belief = np.full(n_s, 1.0 / n_s) if _patroller_start(world) is not None else np.zeros(n_s)

    def choose(epoch, patroller, learner):
        nonlocal belief
        if patroller is None:
            return arena.next_cell(learner, belief, step, opts)
        if epoch > 0:
            belief = belief @ step
        belief = arena.observe(belief, learner, patroller)
        return arena.next_cell(learner, belief, step, opts)

    return _run_trial(world, seed, choose, opts)


def random_attack_trial(world: World, planner_opts: Optional[PlannerOptions] = None, seed=None) -> TrialResult:
    """Wait a random time, then run the shortest path regardless of the patroller."""
    if world.config.domain is not Domain.PATROL:
        raise ConfigurationError("penetration trials need a patrol world")
    opts = planner_opts or planner_options(world)
    arena = _arena(world)
    seq = np.random.SeedSequence(seed if isinstance(seed, int) else 0)
    wait_seed, run_seed = seq.spawn(2)
    start_at = int(math.floor(random_attack(world, np.random.default_rng(wait_seed))))

    route = {a: b for a, b in zip(arena.shortest, arena.shortest[1:])}

    def choose(epoch, patroller, learner):
        return route.get(learner, learner) if epoch >= start_at else learner

    return _run_trial(world, np.random.default_rng(run_seed), choose, opts)

"""Episode loop, multi-run training, convergence detection and metrics.

One training run owns a :class:`QTable`, a :class:`StateRegistry` and a
:class:`Schedules` instance.  Each step of an episode:

1. decays epsilon and alpha (``eps <- max(eps * exp(-eta), eps_min)`` while
   above the minimum, same for alpha);
2. chooses an action epsilon-greedily over all eight directions;
3. if that move collides, redraws uniformly among the remaining directions
   until one is free;
4. senses the new cell (its RSS, or its coordinates for the location-based
   baseline), rewards the move and applies the Q update.

The episode ends when the goal test passes or the step cap is hit.
"""

from __future__ import annotations

import enum
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _kernels as K
from .gridworld import ACTIONS, CellIndex, FloorPlan, move_table
from .qlearn import QTable, RewardKind, RewardSpec, StateMode, StateRegistry
from .rssfield import RssField, count_aliased_cells

__all__ = [
    "Method",
    "Termination",
    "TrainConfig",
    "Schedules",
    "EpisodeLog",
    "RunMetrics",
    "AggregateReport",
    "Environment",
    "StartAtGoal",
    "InvalidTrajectory",
    "EmptyInput",
    "RaggedEpisodeCounts",
    "run_episode",
    "train",
    "train_runs",
    "detect_convergence",
    "greedy_trajectory",
    "path_length",
    "aggregate_runs",
    "run_rng",
    "write_metrics",
]

log = logging.getLogger(__name__)


class StartAtGoal(ValueError):
    pass


class InvalidTrajectory(ValueError):
    pass


class EmptyInput(ValueError):
    pass


class RaggedEpisodeCounts(ValueError):
    pass


class Method(str, enum.Enum):
    RSS_BASED = "rss"
    LOCATION_BASED = "location"


class Termination(str, enum.Enum):
    GOAL_REACHED = "goal"
    STEP_CAP_HIT = "cap"


@dataclass(frozen=True)
class TrainConfig:
    method: Method = Method.RSS_BASED
    epsilon_max: float = 1.0
    epsilon_min: float = 0.01
    alpha_max: float = 0.5
    alpha_min: float = 0.05
    eta: float = 1e-5
    gamma: float = 0.98
    speed_cells_per_step: int = 1
    goal_rss_dbm: float = -21.0
    goal_dist_m: float = 2.0
    goal_bonus: float = 1000.0
    goal_bonus_mode: str = "replace"
    episodes: int = 1000
    max_steps_per_episode: int = 10_000
    runs: int = 1
    seed: int = 0
    th_db: float = 0.0
    sensing_interval_s: float = 1.0
    decay_per: str = "step"
    random_start: bool = False

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        problems = []
        if not 0 <= self.epsilon_min <= self.epsilon_max <= 1:
            problems.append("need 0 <= epsilon_min <= epsilon_max <= 1")
        if not 0 < self.alpha_min <= self.alpha_max <= 1:
            problems.append("need 0 < alpha_min <= alpha_max <= 1")
        if not 0 <= self.gamma < 1:
            problems.append("need 0 <= gamma < 1")
        if self.eta < 0:
            problems.append("eta must be >= 0")
        if self.speed_cells_per_step < 1:
            problems.append("speed_cells_per_step must be >= 1")
        if self.episodes < 0:
            problems.append("episodes must be >= 0")
        if self.max_steps_per_episode < 1:
            problems.append("max_steps_per_episode must be >= 1")
        if self.runs < 1:
            problems.append("runs must be >= 1")
        if self.th_db < 0:
            problems.append("th_db must be >= 0")
        if self.goal_bonus < 0:
            problems.append("goal_bonus must be >= 0")
        if self.goal_bonus_mode not in ("replace", "add"):
            problems.append("goal_bonus_mode must be 'replace' or 'add'")
        if self.decay_per not in ("step", "episode"):
            problems.append("decay_per must be 'step' or 'episode'")
        if self.sensing_interval_s <= 0:
            problems.append("sensing_interval_s must be > 0")
        if problems:
            raise ValueError("invalid TrainConfig: " + "; ".join(problems))

    @property
    def reward_spec(self) -> RewardSpec:
        kind = (
            RewardKind.RSS_DELTA
            if self.method is Method.RSS_BASED
            else RewardKind.INVERSE_DISTANCE
        )
        return RewardSpec(kind, self.goal_bonus, self.goal_bonus_mode)

    def new_registry(self) -> StateRegistry:
        if self.method is Method.RSS_BASED:
            return StateRegistry(StateMode.RSS, self.th_db)
        return StateRegistry(StateMode.LOCATION)


@dataclass
class Schedules:
    """Exploration rate and learning rate, decayed in closed form.

    After ``k`` decays the value is ``max(start * exp(-k * eta), minimum)``,
    which equals ``k`` repeated multiplications by ``exp(-eta)`` without the
    rounding drift.
    """

    epsilon: float
    alpha: float
    epsilon_start: float
    alpha_start: float
    epsilon_min: float
    alpha_min: float
    eta: float
    decays: int = 0

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "Schedules":
        return cls(
            cfg.epsilon_max, cfg.alpha_max, cfg.epsilon_max, cfg.alpha_max,
            cfg.epsilon_min, cfg.alpha_min, cfg.eta,
        )

    def decay(self, n: int = 1) -> None:
        self.decays += n
        if self.epsilon > self.epsilon_min:
            self.epsilon = max(self.epsilon_start * math.exp(-self.decays * self.eta), self.epsilon_min)
        if self.alpha > self.alpha_min:
            self.alpha = max(self.alpha_start * math.exp(-self.decays * self.eta), self.alpha_min)


@dataclass
class EpisodeLog:
    steps: int
    trajectory: list[CellIndex]
    terminated: Termination
    epsilon_end: float
    alpha_end: float
    rewards: list[float] = field(default_factory=list)


@dataclass
class RunMetrics:
    steps_per_episode: np.ndarray
    visit_counts: np.ndarray
    convergence_episode: int | None
    convergence_sim_time_s: float | None
    final_trajectory: list[CellIndex]
    final_path_length_m: float
    final_reached: bool = False
    step_cap_hits: int = 0
    n_states: int = 0
    aliased_cells: int = 0
    episodes: list[EpisodeLog] | None = None
    table: QTable | None = None


@dataclass
class AggregateReport:
    n_runs: int
    mean_steps: np.ndarray
    std_steps: np.ndarray
    convergence_episodes: list[int | None]
    convergence_times_s: list[float | None]
    mean_convergence_episode: float | None
    std_convergence_episode: float | None
    mean_convergence_time_s: float | None
    std_convergence_time_s: float | None
    not_converged: int
    visit_counts: np.ndarray
    mean_final_path_length_m: float
    final_reached: int


class Environment:
    """Per-cell lookup arrays shared by every episode of a configuration."""

    def __init__(self, plan: FloorPlan, field: RssField, cfg: TrainConfig):
        if not field.matches(plan):
            raise ValueError(f"field shape {field.shape} does not match plan {plan.shape}")
        self.plan = plan
        self.field = field
        self.cfg = cfg
        self.moves = move_table(plan, cfg.speed_cells_per_step)
        self.rss = field.values.ravel().astype(np.float64)
        rr, cc = np.indices(plan.shape)
        tr, tc = plan.target
        self.dist = (plan.cell_size_m * np.hypot(rr - tr, cc - tc)).ravel()
        free = ~plan.blocked.ravel()
        if cfg.method is Method.RSS_BASED:
            self.is_goal = free & (self.rss > cfg.goal_rss_dbm)
        else:
            self.is_goal = free & (self.dist < cfg.goal_dist_m)
        self.n_free = int(free.sum())
        self.start_candidates = np.flatnonzero(free & ~self.is_goal)
        self.params = np.array([
            cfg.epsilon_max, cfg.epsilon_min, cfg.alpha_max, cfg.alpha_min, cfg.eta,
            cfg.gamma, cfg.goal_bonus, float(cfg.goal_bonus_mode == "add"),
            float(cfg.method is Method.LOCATION_BASED), float(cfg.decay_per == "step"),
            float(cfg.max_steps_per_episode),
        ])

    def observation(self, flat: int):
        if self.cfg.method is Method.RSS_BASED:
            return float(self.rss[flat])
        return self.plan.unflat(flat)

    def cells(self, flats) -> list[CellIndex]:
        cols = self.plan.cols
        return [CellIndex(int(i) // cols, int(i) % cols) for i in flats]


def run_rng(seed: int, run_index: int) -> np.random.Generator:
    """Independent stream for one run, split from the master seed."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(run_index,)))


class _Learner:
    """Mutable state of one training run plus its cell -> state cache."""

    def __init__(self, env: Environment, table: QTable, registry: StateRegistry,
                 schedules: Schedules, cell_state: np.ndarray | None = None):
        self.env = env
        self.table = table
        self.registry = registry
        self.schedules = schedules
        table.reserve(env.n_free + 1)
        if cell_state is None:
            cell_state = np.full(env.plan.rows * env.plan.cols, -1, dtype=np.int64)
            for flat in np.flatnonzero(~env.plan.blocked.ravel()):
                sid = registry.lookup(env.observation(flat))
                if sid is not None:
                    cell_state[flat] = sid
        self.cell_state = cell_state
        cap = env.cfg.max_steps_per_episode
        self.traj = np.empty(cap + 1, dtype=np.int64)
        self.rewards = np.empty(cap, dtype=np.float64)
        self.roll = np.empty(env.plan.rows * env.plan.cols + 1, dtype=np.int64)
        self.seen = np.zeros(env.plan.rows * env.plan.cols, dtype=np.bool_)

    def resolve(self, flat: int) -> int:
        sid = self.registry.state_for(self.env.observation(flat))
        self.cell_state[flat] = sid
        # capacity may need to follow the registry when states alias across runs
        if sid >= self.table.buffer.shape[0]:
            self.table.reserve(2 * sid + 2)
        self.table._touch(sid)
        return sid

    def episode(self, rng: np.random.Generator, visits: np.ndarray, start: int) -> tuple[int, int]:
        """Run one episode; returns (status code, steps)."""
        env = self.env
        if env.is_goal[start]:
            raise StartAtGoal(f"start {env.plan.unflat(start)} already satisfies the goal test")
        sched = self.schedules
        if env.cfg.decay_per == "episode":
            sched.decay()
        s = self.cell_state[start]
        if s < 0:
            s = self.resolve(start)
        ctx = np.zeros(K.CTX_SIZE, dtype=np.int64)
        ctx[K.CUR] = start
        ctx[K.STATE] = s
        ctx[K.DECAYS] = sched.decays
        sv = np.array([sched.epsilon, sched.alpha])
        params = env.params.copy()
        params[K.P_EPS0] = sched.epsilon_start
        params[K.P_ALPHA0] = sched.alpha_start
        params[K.P_EPS_MIN] = sched.epsilon_min
        params[K.P_ALPHA_MIN] = sched.alpha_min
        params[K.P_ETA] = sched.eta
        self.traj[0] = start
        while True:
            code = K.run_episode_kernel(
                env.moves, env.is_goal, env.rss, env.dist, self.cell_state,
                self.table.buffer, ctx, sv, params, self.traj, self.rewards, visits, rng,
            )
            if code != K.NEED_STATE:
                break
            self.resolve(int(ctx[K.NXT]))
        sched.epsilon, sched.alpha = float(sv[0]), float(sv[1])
        sched.decays = int(ctx[K.DECAYS])
        return code, int(ctx[K.STEPS])

    def greedy(self) -> tuple[np.ndarray, bool]:
        env = self.env
        start = env.plan.flat(env.plan.start)
        absent = []
        try:
            while True:
                code, n = K.greedy_rollout_kernel(
                    env.moves, env.is_goal, self.cell_state, self.table.buffer, start,
                    env.cfg.max_steps_per_episode, self.roll, self.seen,
                )
                if code != K.NEED_STATE:
                    break
                flat = int(self.roll[n - 1])
                sid = self.registry.lookup(env.observation(flat))
                if sid is None:
                    self.cell_state[flat] = K.ABSENT
                    absent.append(flat)
                else:
                    self.cell_state[flat] = sid
        finally:
            for flat in absent:
                self.cell_state[flat] = -1
        return self.roll[:n].copy(), code == K.GOAL


def run_episode(
    plan: FloorPlan,
    field: RssField,
    table: QTable,
    registry: StateRegistry,
    schedules: Schedules,
    cfg: TrainConfig,
    rng: np.random.Generator,
    *,
    env: Environment | None = None,
    visits: np.ndarray | None = None,
) -> EpisodeLog:
    """Run a single training episode from ``plan.start``.

    ``visits`` (flat, int64, one slot per cell) accumulates the cells
    occupied after each move when given.
    """
    env = env or Environment(plan, field, cfg)
    learner = _Learner(env, table, registry, schedules)
    if visits is None:
        visits = np.zeros(plan.rows * plan.cols, dtype=np.int64)
    code, steps = learner.episode(rng, visits, plan.flat(plan.start))
    return EpisodeLog(
        steps=steps,
        trajectory=env.cells(learner.traj[: steps + 1]),
        terminated=Termination.GOAL_REACHED if code == K.GOAL else Termination.STEP_CAP_HIT,
        epsilon_end=schedules.epsilon,
        alpha_end=schedules.alpha,
        rewards=[float(r) for r in learner.rewards[:steps]],
    )


def greedy_trajectory(
    plan: FloorPlan,
    field: RssField,
    table: QTable,
    registry: StateRegistry,
    cfg: TrainConfig,
    *,
    env: Environment | None = None,
) -> tuple[list[CellIndex], bool]:
    """Roll out the greedy policy from the start without exploring.

    Ties go to the first direction in compass order.  The rollout stops at
    the goal, at the step cap, or before re-entering a visited cell.
    """
    env = env or Environment(plan, field, cfg)
    learner = _Learner(env, table, registry, Schedules.from_config(cfg))
    flats, reached = learner.greedy()
    return env.cells(flats), reached


def detect_convergence(greedy_trajectories: Sequence) -> int | None:
    """First index ``i >= 2`` whose trajectory equals the two before it.

    ``None`` entries (rollouts that missed the goal) never match.
    """
    for i in range(2, len(greedy_trajectories)):
        a, b, c = greedy_trajectories[i - 2], greedy_trajectories[i - 1], greedy_trajectories[i]
        if a is None or b is None or c is None:
            continue
        if _same_path(a, b) and _same_path(b, c):
            return i
    return None


def _same_path(a, b) -> bool:
    return len(a) == len(b) and all(tuple(x) == tuple(y) for x, y in zip(a, b))


def path_length(trajectory: Sequence, cell_size_m: float = 1.0, step_cells: int | None = None) -> float:
    """Flown distance in metres; diagonal moves cost sqrt(2) per cell."""
    total = 0.0
    for (r0, c0), (r1, c1) in zip(trajectory, trajectory[1:]):
        dr, dc = abs(r1 - r0), abs(c1 - c0)
        k = max(dr, dc)
        if k == 0 or (dr and dc and dr != dc):
            raise InvalidTrajectory(f"({r0},{c0}) -> ({r1},{c1}) is not a single move")
        if step_cells is not None and k != step_cells:
            raise InvalidTrajectory(
                f"({r0},{c0}) -> ({r1},{c1}) spans {k} cells, expected {step_cells}"
            )
        total += cell_size_m * k * (math.sqrt(2.0) if dr and dc else 1.0)
    return total


def train(plan: FloorPlan, field: RssField, cfg: TrainConfig, run_index: int = 0,
          *, record_episodes: bool = False) -> RunMetrics:
    """One independent training run of ``cfg.episodes`` episodes."""
    env = Environment(plan, field, cfg)
    rng = run_rng(cfg.seed, run_index)
    table = QTable(env.n_free + 1)
    registry = cfg.new_registry()
    learner = _Learner(env, table, registry, Schedules.from_config(cfg))
    visits = np.zeros(plan.rows * plan.cols, dtype=np.int64)
    steps = np.zeros(cfg.episodes, dtype=np.int64)
    start = plan.flat(plan.start)
    if env.is_goal[start]:
        raise StartAtGoal(f"start {plan.start} already satisfies the goal test")

    episodes = [] if record_episodes else None
    history: list[bytes | None] = []
    converged = None
    cap_hits = 0
    for ep in range(cfg.episodes):
        if cfg.random_start:
            start = int(env.start_candidates[int(rng.random() * len(env.start_candidates))])
        code, n = learner.episode(rng, visits, start)
        steps[ep] = n
        if code != K.GOAL:
            cap_hits += 1
        if record_episodes:
            sched = learner.schedules
            episodes.append(EpisodeLog(
                n, env.cells(learner.traj[: n + 1]),
                Termination.GOAL_REACHED if code == K.GOAL else Termination.STEP_CAP_HIT,
                sched.epsilon, sched.alpha, [float(r) for r in learner.rewards[:n]],
            ))
        if converged is None:
            path, reached = learner.greedy()
            history.append(path.tobytes() if reached else None)
            if len(history) >= 3 and history[-1] is not None and history[-1] == history[-2] == history[-3]:
                converged = ep
    if cap_hits:
        log.info("run %d: %d of %d episodes hit the step cap", run_index, cap_hits, cfg.episodes)

    final, reached = learner.greedy()
    final_cells = env.cells(final)
    sim_time = None
    if converged is not None:
        sim_time = float(steps[: converged + 1].sum()) * cfg.sensing_interval_s
    return RunMetrics(
        steps_per_episode=steps,
        visit_counts=visits.reshape(plan.shape),
        convergence_episode=converged,
        convergence_sim_time_s=sim_time,
        final_trajectory=final_cells,
        final_path_length_m=path_length(final_cells, plan.cell_size_m),
        final_reached=reached,
        step_cap_hits=cap_hits,
        n_states=len(registry),
        aliased_cells=count_aliased_cells(plan, field) if cfg.method is Method.RSS_BASED else 0,
        episodes=episodes,
        table=table,
    )


def _train_one(args):
    plan, field, cfg, i = args
    return train(plan, field, cfg, i)


def train_runs(plan: FloorPlan, field: RssField, cfg: TrainConfig, workers: int = 1) -> list[RunMetrics]:
    """``cfg.runs`` independent runs; run ``i`` uses stream ``(seed, i)``."""
    jobs = [(plan, field, cfg, i) for i in range(cfg.runs)]
    if workers > 1 and cfg.runs > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_train_one, jobs))
    return [_train_one(job) for job in jobs]


def _mean_std(values):
    if not values:
        return None, None
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def aggregate_runs(metrics: Sequence[RunMetrics]) -> AggregateReport:
    if not metrics:
        raise EmptyInput("no runs to aggregate")
    lengths = {len(m.steps_per_episode) for m in metrics}
    if len(lengths) != 1:
        raise RaggedEpisodeCounts(f"runs have differing episode counts: {sorted(lengths)}")
    steps = np.stack([np.asarray(m.steps_per_episode, dtype=np.float64) for m in metrics])
    conv = [m.convergence_episode for m in metrics]
    times = [m.convergence_sim_time_s for m in metrics]
    ce_mean, ce_std = _mean_std([c for c in conv if c is not None])
    ct_mean, ct_std = _mean_std([t for t in times if t is not None])
    return AggregateReport(
        n_runs=len(metrics),
        mean_steps=steps.mean(axis=0),
        std_steps=steps.std(axis=0),
        convergence_episodes=conv,
        convergence_times_s=times,
        mean_convergence_episode=ce_mean,
        std_convergence_episode=ce_std,
        mean_convergence_time_s=ct_mean,
        std_convergence_time_s=ct_std,
        not_converged=sum(c is None for c in conv),
        visit_counts=np.sum([m.visit_counts for m in metrics], axis=0),
        mean_final_path_length_m=float(np.mean([m.final_path_length_m for m in metrics])),
        final_reached=sum(bool(m.final_reached) for m in metrics),
    )


def _num(x: float) -> str:
    return format(float(x), ".6f")


def write_metrics(out_dir, metrics: Sequence[RunMetrics], report: AggregateReport | None = None) -> dict[str, Path]:
    """Write steps.csv, convergence.csv, visits.csv and final_path.json-lines.

    The final path written is that of run 0.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = report or aggregate_runs(metrics)
    paths = {name: out / name for name in
             ("steps.csv", "convergence.csv", "visits.csv", "final_path.json-lines")}

    lines = ["episode,mean_steps,std_steps"]
    lines += [f"{i},{_num(m)},{_num(s)}" for i, (m, s) in enumerate(zip(report.mean_steps, report.std_steps))]
    _write_lines(paths["steps.csv"], lines)

    lines = ["run,converged_episode,sim_time_s"]
    for i, m in enumerate(metrics):
        ep = "" if m.convergence_episode is None else str(m.convergence_episode)
        t = "" if m.convergence_sim_time_s is None else _num(m.convergence_sim_time_s)
        lines.append(f"{i},{ep},{t}")
    _write_lines(paths["convergence.csv"], lines)

    lines = ["row,col,count"]
    rows, cols = report.visit_counts.shape
    lines += [f"{r},{c},{int(report.visit_counts[r, c])}" for r in range(rows) for c in range(cols)]
    _write_lines(paths["visits.csv"], lines)

    _write_lines(paths["final_path.json-lines"], [f"{r},{c}" for r, c in metrics[0].final_trajectory])
    return paths


def _write_lines(path: Path, lines: list[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")



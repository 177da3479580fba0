import math

import numpy as np
import pytest

from oracles import bfs_steps, open_plan, reference_episode
from rssnav.gridworld import ACTIONS, Action, apply_action, parse_floor_plan
from rssnav.qlearn import QTable
from rssnav.rssfield import SourceSpec, synthesize_field
from rssnav.trainer import (
    EmptyInput,
    InvalidTrajectory,
    Method,
    RaggedEpisodeCounts,
    RunMetrics,
    Schedules,
    StartAtGoal,
    Termination,
    TrainConfig,
    aggregate_runs,
    detect_convergence,
    greedy_trajectory,
    path_length,
    run_episode,
    run_rng,
    train,
    train_runs,
)


def with_field(plan):
    return plan, synthesize_field(plan, SourceSpec(plan.target))


def eastward_setup():
    plan, field = with_field(parse_floor_plan("S...T"))
    cfg = TrainConfig(method=Method.RSS_BASED, epsilon_max=0.0, epsilon_min=0.0)
    registry = cfg.new_registry()
    table = QTable()
    for c in range(5):
        table.set(registry.state_for(float(field[(0, c)])), Action.E, 1.0)
    return plan, field, cfg, table, registry


class TestRunEpisode:
    def test_forced_greedy_corridor(self):
        plan, field, cfg, table, registry = eastward_setup()
        sched = Schedules.from_config(cfg)
        log = run_episode(plan, field, table, registry, sched, cfg, np.random.default_rng(0))
        assert log.trajectory == [(0, 0), (0, 1), (0, 2), (0, 3)]
        assert log.terminated is Termination.GOAL_REACHED
        assert field[(0, 3)] > -21.0 >= field[(0, 2)]
        assert log.steps == 3 and log.rewards[-1] == 1000.0

    def test_walled_in_start(self):
        plan, field = with_field(parse_floor_plan("S#.\n##.\n..T"))
        cfg = TrainConfig()
        log = run_episode(plan, field, QTable(), cfg.new_registry(), Schedules.from_config(cfg),
                          cfg, np.random.default_rng(0))
        assert log.terminated is Termination.STEP_CAP_HIT
        assert log.steps == 0 and log.trajectory == [(0, 0)]

    def test_start_at_goal(self):
        plan, field = with_field(parse_floor_plan("ST..."))
        cfg = TrainConfig(method=Method.LOCATION_BASED)
        with pytest.raises(StartAtGoal):
            run_episode(plan, field, QTable(), cfg.new_registry(), Schedules.from_config(cfg),
                        cfg, np.random.default_rng(0))
        with pytest.raises(StartAtGoal):
            train(plan, field, cfg)

    def test_step_cap(self):
        plan, field = with_field(open_plan(10, 10, (9, 0), (0, 9)))
        cfg = TrainConfig(max_steps_per_episode=5)
        log = run_episode(plan, field, QTable(), cfg.new_registry(), Schedules.from_config(cfg),
                          cfg, np.random.default_rng(0))
        assert log.terminated is Termination.STEP_CAP_HIT
        assert log.steps == 5 and len(log.trajectory) == 6


def padded(table, n):
    # states seen but never written count in one table and not the other
    out = np.zeros((n, len(ACTIONS)))
    vals = table.values
    out[: len(vals)] = vals
    return out


CASES = [
    ("open", Method.RSS_BASED, 1, 0.0),
    ("open", Method.LOCATION_BASED, 1, 0.0),
    ("walls", Method.RSS_BASED, 2, 0.0),
    ("walls", Method.LOCATION_BASED, 2, 0.0),
    ("walls", Method.RSS_BASED, 1, 1.5),
    ("walls", Method.RSS_BASED, 4, 0.0),
]


@pytest.mark.parametrize("layout,method,speed,th", CASES)
def test_kernel_matches_reference_interpreter(layout, method, speed, th):
    if layout == "open":
        plan = open_plan(10, 10, (9, 0), (0, 9))
    else:
        plan = parse_floor_plan(
            "S.........\n"
            "..........\n"
            "####.#####\n"
            "..........\n"
            "....##....\n"
            "..........\n"
            "..#.......\n"
            "..#....#..\n"
            "..........\n"
            "........T.\n"
        )
    plan, field = with_field(plan)
    cfg = TrainConfig(method=method, speed_cells_per_step=speed, th_db=th,
                      eta=1e-3, max_steps_per_episode=400)

    table, registry = QTable(), cfg.new_registry()
    sched = Schedules.from_config(cfg)
    rng = np.random.default_rng(99)

    ref_table, ref_registry = QTable(), cfg.new_registry()
    ref_sched = {"k": 0, "eps": cfg.epsilon_max, "alpha": cfg.alpha_max}
    ref_rng = np.random.default_rng(99)

    for _ in range(25):
        log = run_episode(plan, field, table, registry, sched, cfg, rng)
        traj, rewards, end = reference_episode(plan, field, cfg, ref_table, ref_registry, ref_sched, ref_rng)
        assert [tuple(c) for c in log.trajectory] == traj
        assert log.rewards == rewards
        assert log.terminated.value == end
        assert sched.epsilon == ref_sched["eps"] and sched.alpha == ref_sched["alpha"]
    assert registry.anchors == ref_registry.anchors
    n = len(registry)
    assert np.array_equal(padded(table, n), padded(ref_table, n))
    assert rng.random() == ref_rng.random()


class TestTrain:
    def test_zero_episodes(self, rooms):
        m = train(*rooms, TrainConfig(episodes=0))
        assert len(m.steps_per_episode) == 0
        assert m.convergence_episode is None and m.convergence_sim_time_s is None

    def test_deterministic(self, rooms):
        cfg = TrainConfig(episodes=150, seed=7)
        a, b = train(*rooms, cfg, 3), train(*rooms, cfg, 3)
        assert np.array_equal(a.steps_per_episode, b.steps_per_episode)
        assert np.array_equal(a.visit_counts, b.visit_counts)
        assert a.final_trajectory == b.final_trajectory
        assert a.convergence_episode == b.convergence_episode
        assert np.array_equal(a.table.values, b.table.values)

    def test_runs_use_distinct_streams(self, rooms):
        cfg = TrainConfig(episodes=30, seed=7)
        assert not np.array_equal(train(*rooms, cfg, 0).steps_per_episode,
                                  train(*rooms, cfg, 1).steps_per_episode)
        assert run_rng(7, 1).random() != run_rng(7, 0).random()

    def test_parallel_matches_serial(self, rooms):
        cfg = TrainConfig(episodes=40, runs=3, seed=2)
        serial = train_runs(*rooms, cfg)
        parallel = train_runs(*rooms, cfg, workers=2)
        for a, b in zip(serial, parallel):
            assert np.array_equal(a.steps_per_episode, b.steps_per_episode)

    @pytest.mark.parametrize("method", list(Method))
    @pytest.mark.parametrize("speed", [1, 2, 4])
    def test_episode_logs_are_consistent(self, rooms, method, speed):
        plan, field = rooms
        cfg = TrainConfig(method=method, speed_cells_per_step=speed, episodes=60, seed=11)
        m = train(plan, field, cfg, record_episodes=True)
        eps_prev, alpha_prev = cfg.epsilon_max, cfg.alpha_max
        for ep in m.episodes:
            assert ep.steps == len(ep.trajectory) - 1 == len(ep.rewards)
            # replay validation
            for a, b in zip(ep.trajectory, ep.trajectory[1:]):
                assert any(apply_action(plan, a, act, speed) == b for act in ACTIONS)
            last = ep.trajectory[-1]
            if ep.terminated is Termination.GOAL_REACHED:
                if method is Method.RSS_BASED:
                    assert field[last] > cfg.goal_rss_dbm
                else:
                    assert plan.center_distance_m(last, plan.target) < cfg.goal_dist_m
            assert cfg.epsilon_min <= ep.epsilon_end <= eps_prev
            assert cfg.alpha_min <= ep.alpha_end <= alpha_prev
            eps_prev, alpha_prev = ep.epsilon_end, ep.alpha_end
        assert m.visit_counts.sum() == m.steps_per_episode.sum()
        assert m.final_path_length_m >= 0

    def test_convergence_time(self, rooms):
        m = train(*rooms, TrainConfig(episodes=300, seed=1, sensing_interval_s=0.5))
        assert m.convergence_episode is not None
        i = m.convergence_episode
        assert m.convergence_sim_time_s == pytest.approx(0.5 * m.steps_per_episode[: i + 1].sum())

    def test_decay_per_episode(self, rooms):
        cfg = TrainConfig(episodes=20, decay_per="episode", eta=0.01, seed=4)
        m = train(*rooms, cfg, record_episodes=True)
        for n, ep in enumerate(m.episodes, start=1):
            assert ep.epsilon_end == pytest.approx(math.exp(-0.01 * n), rel=1e-12)

    def test_bonus_add(self, rooms):
        plan, field = rooms
        cfg = TrainConfig(episodes=5, goal_bonus_mode="add", seed=4)
        m = train(plan, field, cfg, record_episodes=True)
        for ep in m.episodes:
            if ep.terminated is Termination.GOAL_REACHED:
                a, b = ep.trajectory[-2], ep.trajectory[-1]
                assert ep.rewards[-1] == pytest.approx(1000.0 + field[b] - field[a], abs=1e-9)

    def test_random_start(self, rooms):
        plan, field = rooms
        cfg = TrainConfig(episodes=30, random_start=True, seed=4)
        m = train(plan, field, cfg, record_episodes=True)
        starts = {ep.trajectory[0] for ep in m.episodes}
        assert len(starts) > 5
        assert all(not plan.blocked[s] for s in starts)

    def test_rejects_bad_config(self):
        for bad in [dict(runs=0), dict(gamma=1.0), dict(alpha_min=0.0), dict(epsilon_min=0.5, epsilon_max=0.2),
                    dict(speed_cells_per_step=0), dict(decay_per="run"), dict(max_steps_per_episode=0)]:
            with pytest.raises(ValueError):
                TrainConfig(**bad)


@pytest.mark.slow
def test_open_grid_location_is_optimal():
    plan, field = with_field(open_plan(10, 10, (9, 0), (0, 9)))
    cfg = TrainConfig(method=Method.LOCATION_BASED, episodes=2000, runs=100, seed=2024)
    optimum = bfs_steps(plan.blocked, plan.start,
                        lambda c: plan.center_distance_m(c, plan.target) < cfg.goal_dist_m)
    assert optimum == 8
    runs = train_runs(plan, field, cfg)
    optimal = sum(m.final_reached and len(m.final_trajectory) - 1 == optimum for m in runs)
    assert optimal >= 95


@pytest.mark.slow
def test_open_grid_rss_always_reaches():
    plan, field = with_field(open_plan(10, 10, (9, 0), (0, 9)))
    cfg = TrainConfig(method=Method.RSS_BASED, episodes=2000, runs=100, seed=2024)
    runs = train_runs(plan, field, cfg)
    assert all(m.final_reached for m in runs)


@pytest.mark.slow
@pytest.mark.parametrize("method", list(Method))
def test_small_grid_converges(method):
    plan, field = with_field(open_plan(6, 6, (5, 0), (0, 5)))
    cfg = TrainConfig(method=method, episodes=5000, runs=100, seed=77)
    runs = train_runs(plan, field, cfg)
    assert sum(m.convergence_episode is not None for m in runs) >= 99


class TestGreedyTrajectory:
    def test_pretrained_corridor(self):
        plan, field, cfg, table, registry = eastward_setup()
        path, reached = greedy_trajectory(plan, field, table, registry, cfg)
        assert path == [(0, 0), (0, 1), (0, 2), (0, 3)]
        assert reached

    @pytest.mark.parametrize("method", list(Method))
    def test_untrained_policy_loops(self, method):
        plan, field = with_field(open_plan(5, 5, (4, 0), (4, 4)))
        cfg = TrainConfig(method=method)
        registry = cfg.new_registry()
        path, reached = greedy_trajectory(plan, field, QTable(), registry, cfg)
        assert not reached
        assert path == [(4, 0), (3, 0), (2, 0), (1, 0), (0, 0), (0, 1), (0, 2), (0, 3), (0, 4), (1, 4)]
        assert len(set(path)) == len(path)
        # policy extraction must not grow the registry
        assert len(registry) == 0


class TestDetectConvergence:
    def test_examples(self):
        p1, p2 = [(0, 0), (0, 1)], [(0, 0), (1, 1)]
        assert detect_convergence([p1, p2, p2, p2]) == 3
        assert detect_convergence([p1, p2] * 5) is None
        assert detect_convergence([p1, p1, p1]) == 2
        assert detect_convergence([p1, p1]) is None
        assert detect_convergence([]) is None

    def test_missed_goal_never_matches(self):
        assert detect_convergence([None, None, None]) is None


class TestPathLength:
    def test_straight(self):
        assert path_length([(0, 0), (0, 1), (0, 2), (0, 3)]) == 3.0

    def test_diagonal_fast(self):
        assert path_length([(0, 0), (2, 2), (4, 4)], 1.0, step_cells=2) == pytest.approx(5.657, abs=1e-3)

    def test_cell_size(self):
        assert path_length([(0, 0), (1, 0)], cell_size_m=0.5) == 0.5

    def test_empty_and_single(self):
        assert path_length([]) == 0.0
        assert path_length([(3, 3)]) == 0.0

    @pytest.mark.parametrize("bad", [[(0, 0), (0, 0)], [(0, 0), (1, 2)], [(0, 0), (0, 3)]])
    def test_invalid(self, bad):
        with pytest.raises(InvalidTrajectory):
            path_length(bad, step_cells=1)


def fake_run(steps, conv=None, visits=None, length=0.0):
    steps = np.asarray(steps)
    return RunMetrics(
        steps_per_episode=steps,
        visit_counts=np.zeros((2, 2), dtype=np.int64) if visits is None else visits,
        convergence_episode=conv,
        convergence_sim_time_s=None if conv is None else float(steps[: conv + 1].sum()),
        final_trajectory=[],
        final_path_length_m=length,
    )


class TestAggregate:
    def test_two_runs(self):
        rep = aggregate_runs([fake_run([10, 8], length=2.0), fake_run([12, 6], length=4.0)])
        assert rep.mean_steps.tolist() == [11.0, 7.0]
        assert rep.std_steps.tolist() == [1.0, 1.0]
        assert rep.mean_final_path_length_m == 3.0
        assert rep.not_converged == 2 and rep.mean_convergence_episode is None

    def test_single_run_identity(self):
        v = np.array([[1, 2], [3, 4]])
        rep = aggregate_runs([fake_run([5, 4, 3, 3], conv=3, visits=v, length=7.5)])
        assert rep.mean_steps.tolist() == [5, 4, 3, 3]
        assert rep.mean_convergence_episode == 3 and rep.std_convergence_episode == 0
        assert rep.mean_convergence_time_s == 15.0
        assert np.array_equal(rep.visit_counts, v)

    def test_convergence_stats_skip_unconverged(self):
        rep = aggregate_runs([fake_run([1, 1, 1, 1], conv=2), fake_run([1, 1, 1, 1], conv=None),
                              fake_run([1, 1, 1, 1], conv=3)])
        assert rep.mean_convergence_episode == 2.5
        assert rep.std_convergence_episode == 0.5
        assert rep.not_converged == 1

    def test_errors(self):
        with pytest.raises(EmptyInput):
            aggregate_runs([])
        with pytest.raises(RaggedEpisodeCounts):
            aggregate_runs([fake_run([1, 2]), fake_run([1])])

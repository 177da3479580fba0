"""Compiled inner loops for training and greedy rollouts.

Both loops work on flat cell indices and hand control back to Python
whenever they reach a cell whose state id is not cached yet, so state
creation stays in :class:`rssnav.qlearn.StateRegistry`.
"""

import math

import numba
import numpy as np

N_ACTIONS = 8

# ctx slots
CUR, NXT, STATE, ACTION, STEPS, PHASE, DECAYS = range(7)
CTX_SIZE = 7

# sched slots
EPS, ALPHA = range(2)

# params slots
(
    P_EPS0,
    P_EPS_MIN,
    P_ALPHA0,
    P_ALPHA_MIN,
    P_ETA,
    P_GAMMA,
    P_BONUS,
    P_BONUS_ADD,
    P_INV_DIST,
    P_DECAY_STEP,
    P_CAP,
) = range(11)
PARAMS_SIZE = 11

# return codes
NEED_STATE = 0
GOAL = 1
CAP = 2
STUCK = 3
LOOP = 4

# greedy rollouts mark cells known to have no state yet with this value
ABSENT = -2


@numba.njit(cache=True)
def run_episode_kernel(moves, is_goal, rss, dist, cell_state, q, ctx, sched, params,
                       traj, rewards, visits, rng):
    eps0 = params[P_EPS0]
    eps_min = params[P_EPS_MIN]
    alpha0 = params[P_ALPHA0]
    alpha_min = params[P_ALPHA_MIN]
    eta = params[P_ETA]
    gamma = params[P_GAMMA]
    bonus = params[P_BONUS]
    bonus_add = params[P_BONUS_ADD] != 0.0
    inv_dist = params[P_INV_DIST] != 0.0
    decay_step = params[P_DECAY_STEP] != 0.0
    cap = int(params[P_CAP])
    remaining = np.empty(N_ACTIONS, np.int64)
    ties = np.empty(N_ACTIONS, np.int64)

    while True:
        if ctx[PHASE] == 1:
            nxt = ctx[NXT]
            s2 = cell_state[nxt]
            if s2 < 0:
                return NEED_STATE
            cur = ctx[CUR]
            s = ctx[STATE]
            a = ctx[ACTION]
            steps = ctx[STEPS]
            goal = is_goal[nxt]
            if inv_dist:
                d = dist[nxt]
                base = 1.0 / d if d > 0.0 else 0.0
            else:
                base = rss[nxt] - rss[cur]
            if goal:
                r = base + bonus if bonus_add else bonus
            else:
                r = base
            best = q[s2, 0]
            for b in range(1, N_ACTIONS):
                if q[s2, b] > best:
                    best = q[s2, b]
            alpha = sched[ALPHA]
            q[s, a] = (1.0 - alpha) * q[s, a] + alpha * (r + gamma * best)
            rewards[steps - 1] = r
            traj[steps] = nxt
            visits[nxt] += 1
            ctx[CUR] = nxt
            ctx[STATE] = s2
            ctx[PHASE] = 0
            if goal:
                return GOAL
            if steps >= cap:
                return CAP

        cur = ctx[CUR]
        s = ctx[STATE]
        if decay_step:
            ctx[DECAYS] += 1
            k = ctx[DECAYS]
            if sched[EPS] > eps_min:
                sched[EPS] = max(eps0 * math.exp(-k * eta), eps_min)
            if sched[ALPHA] > alpha_min:
                sched[ALPHA] = max(alpha0 * math.exp(-k * eta), alpha_min)

        if rng.random() < sched[EPS]:
            a = int(rng.random() * N_ACTIONS)
        else:
            best = q[s, 0]
            for b in range(1, N_ACTIONS):
                if q[s, b] > best:
                    best = q[s, b]
            nt = 0
            for b in range(N_ACTIONS):
                if q[s, b] == best:
                    ties[nt] = b
                    nt += 1
            if nt == 1:
                a = ties[0]
            else:
                a = ties[int(rng.random() * nt)]

        dest = moves[cur, a]
        if dest < 0:
            n = 0
            for b in range(N_ACTIONS):
                if b != a:
                    remaining[n] = b
                    n += 1
            while n > 0:
                idx = int(rng.random() * n)
                cand = remaining[idx]
                if moves[cur, cand] >= 0:
                    a = cand
                    dest = moves[cur, cand]
                    break
                for j in range(idx, n - 1):
                    remaining[j] = remaining[j + 1]
                n -= 1
            if dest < 0:
                return STUCK

        ctx[ACTION] = a
        ctx[NXT] = dest
        ctx[STEPS] += 1
        ctx[PHASE] = 1


@numba.njit(cache=True)
def greedy_rollout_kernel(moves, is_goal, cell_state, q, start, cap, traj, seen):
    """Follow the compass-order greedy policy from ``start``.

    Returns ``(code, n_cells)``; on NEED_STATE ``traj[n_cells - 1]`` is the
    cell that needs a state lookup.
    """
    seen[:] = False
    traj[0] = start
    seen[start] = True
    n = 1
    cur = start
    while True:
        if is_goal[cur]:
            return GOAL, n
        if n - 1 >= cap:
            return CAP, n
        s = cell_state[cur]
        if s == -1:
            return NEED_STATE, n
        best_a = -1
        best = 0.0
        for b in range(N_ACTIONS):
            if moves[cur, b] < 0:
                continue
            v = q[s, b] if s >= 0 else 0.0
            if best_a < 0 or v > best:
                best = v
                best_a = b
        if best_a < 0:
            return STUCK, n
        nxt = moves[cur, best_a]
        if seen[nxt]:
            return LOOP, n
        seen[nxt] = True
        traj[n] = nxt
        n += 1
        cur = nxt

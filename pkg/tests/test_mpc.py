import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from playplan.core import Pose2, PushTState, SeededRng, Vec2
from playplan.dynamics import PushTModel, StochasticWrapperParams, make_model, rollout
from playplan.mcts import Plan
from playplan.mpc import (
    ActionDistribution,
    MpcParams,
    TrackState,
    cem_update,
    deviation,
    evaluate_population,
    gen_population,
    knots_to_actions,
    mpc_step,
    plan_knots,
    track_plan,
)

DET = PushTModel()


def push_plan(n=30, speed=0.1):
    """The pusher starts under the stem and pushes the T straight up."""
    s0 = PushTState(Vec2(0.5, 0.36), Pose2(0.5, 0.45, 0.0))
    acts = np.tile([0.0, speed], (n, 1))
    tr = rollout(DET, s0, acts)
    return Plan(acts, tr.states, [], 0)


def test_params_invariants():
    with pytest.raises(ValueError):
        MpcParams(n_knots=1)
    with pytest.raises(ValueError):
        MpcParams(H_MPC=2, h_exec=3)
    with pytest.raises(ValueError):
        MpcParams(K=4, K_zero=0, K_elite=5)


def test_knots_to_actions_examples():
    np.testing.assert_allclose(knots_to_actions([[0.1, 0.05], [0.1, 0.05]], 4).actions, [[0.1, 0.05]] * 4)
    a = knots_to_actions([[0.0, 0.0], [0.2, 0.0]], 4).actions
    np.testing.assert_allclose(a[:, 0], [0.0, 0.2 / 3, 0.4 / 3, 0.2], atol=1e-15)
    np.testing.assert_allclose(a[:, 0], [0.0, 0.0667, 0.1333, 0.2], atol=1e-4)
    big = knots_to_actions([[1.0, 0.0], [1.0, 0.0]], 3).actions
    np.testing.assert_allclose(np.hypot(big[:, 0], big[:, 1]), 0.25)


def test_gen_population_examples():
    p = push_plan()
    flat = MpcParams(sigma0=0.0, K_zero=0)
    pop = gen_population(p, 5, flat, SeededRng(0))
    assert pop.shape == (16, 2, 2)
    np.testing.assert_array_equal(pop, np.broadcast_to(plan_knots(p.actions, 5, 4, 2), pop.shape))
    pop = gen_population(p, 5, MpcParams(), SeededRng(0))
    assert pop.shape == (20, 2, 2)
    zero = gen_population(p, 5, MpcParams(sigma0=0.0, K=1, K_elite=1), SeededRng(0))
    np.testing.assert_array_equal(zero[1:], 0.0)


def test_evaluate_population_perfect_tracking():
    p = push_plan()
    params = MpcParams()
    knots = plan_knots(p.actions, 3, 4, 2)[None]
    R = evaluate_population(knots, p.states[3], p, 3, DET, params, SeededRng(0))
    acts = p.actions[3:7]
    assert R[0] == pytest.approx(-params.w_a * np.sum(acts * acts), abs=1e-12)


def test_evaluate_population_prefers_plan_actions():
    p = push_plan()
    params = MpcParams()
    s = p.states[10]
    displaced = PushTState(s.pusher, Pose2(s.tee.x + 0.02, s.tee.y, s.tee.theta))
    pop = np.stack([plan_knots(p.actions, 10, 4, 2), np.zeros((2, 2))])
    R = evaluate_population(pop, displaced, p, 10, DET, params, SeededRng(0))
    assert R[0] > R[1]
    noisy = make_model("pusht", noise=StochasticWrapperParams())
    a = evaluate_population(pop, displaced, p, 10, noisy, params, SeededRng(5))
    b = evaluate_population(pop, displaced, p, 10, noisy, params, SeededRng(5))
    np.testing.assert_array_equal(a, b)


def test_cem_update_examples():
    pop = np.array([[[0.1, 0.0]] * 2, [[0.3, 0.0]] * 2, [[0.9, 0.9]] * 2])
    d = cem_update(pop, np.array([1.0, 1.0, -5.0]), None, 2)
    np.testing.assert_allclose(d.mean, [[0.2, 0.0]] * 2, atol=1e-12)
    one = cem_update(pop, np.array([0.0, 3.0, 1.0]), None, 1)
    np.testing.assert_array_equal(one.mean, pop[1])
    np.testing.assert_allclose(one.std, 0.005)
    cov = one.cov
    assert cov.shape == (2, 2, 2) and cov[0, 0, 1] == 0.0


@given(st.integers(0, 10_000), st.integers(1, 8), st.floats(-100, 100))
def test_cem_update_properties(seed, k_elite, shift):
    g = np.random.default_rng(seed)
    pop = g.uniform(-0.3, 0.3, (10, 2, 2))
    R = g.normal(0, 1, 10)
    d = cem_update(pop, R, None, k_elite, 0.005)
    elite = pop[np.argsort(-R, kind="stable")[:k_elite]]
    assert np.all(d.mean >= elite.min(axis=0) - 1e-12) and np.all(d.mean <= elite.max(axis=0) + 1e-12)
    spread = (elite.max(axis=0) - elite.min(axis=0)) ** 2
    assert np.all(d.std**2 >= 0.005**2 - 1e-15)
    assert np.all(d.std**2 <= np.maximum(spread, 0.005**2) + 1e-12)
    # shifting every reward leaves the elite set, hence the argmax sample, unchanged
    d2 = cem_update(pop, R + shift, None, k_elite, 0.005)
    np.testing.assert_allclose(d2.mean, d.mean, atol=1e-6 * (1 + abs(shift)))
    assert np.argmax(R) == np.argmax(R + shift)


def cem_quadratic(seed, params=None, iters=50):
    """Best-so-far knots after CEM on ``-sum((x - x*)^2)``; returns (best, optimum)."""
    params = params or MpcParams()
    rng = SeededRng(seed)
    target = rng.uniform(-0.2, 0.2, (params.n_knots, 2))
    dist = ActionDistribution(np.zeros_like(target), np.full(target.shape, params.sigma0))
    best, best_r = None, -np.inf
    for i in range(iters):
        pop = gen_population(None, 0, params, rng.child(i), dist)
        R = -((pop - target) ** 2).sum(axis=(1, 2))
        k = int(np.argmax(R))
        if R[k] > best_r:
            best, best_r = pop[k], R[k]
        dist = cem_update(pop, R, dist, params.K_elite, params.sigma_min)
    return best, target


def test_cem_converges_on_quadratic():
    for seed in range(5):
        best, target = cem_quadratic(seed)
        assert np.linalg.norm(best - target) <= 1e-2


def test_mpc_step_degenerate_returns_plan_actions():
    p = push_plan()
    params = MpcParams(N_MPC=1, sigma0=0.0, K_zero=0, K=4, K_elite=1)
    out = mpc_step(TrackState(6, p.states[6]), p, DET, params, SeededRng(0))
    np.testing.assert_allclose(out.actions.actions, p.actions[6:8], atol=1e-15)


def test_mpc_step_best_so_far_monotone_and_corrects():
    p = push_plan()
    s = p.states[8]
    displaced = PushTState(s.pusher, Pose2(s.tee.x + 0.02, s.tee.y, s.tee.theta))
    out = mpc_step(TrackState(8, displaced), p, make_model("pusht", noise=StochasticWrapperParams()),
                   MpcParams(), SeededRng(1))
    assert all(a <= b for a, b in zip(out.best_history, out.best_history[1:]))
    assert len(out.actions) == 2
    assert not np.allclose(out.actions.actions, p.actions[8:10])


def test_track_plan_nominal():
    p = push_plan()
    rec = track_plan(p.states[0], p, DET, DET, MpcParams(), SeededRng(0))
    assert not rec.replan and rec.t_end == len(p.actions)
    end, goal = rec.final.tee, p.states[-1].tee
    assert np.hypot(end.x - goal.x, end.y - goal.y) < 0.05


def test_track_plan_teleport_requests_replan(tmp_path):
    p = push_plan()

    def teleport(t, s, rng):
        if t == 10:
            return PushTState(s.pusher, Pose2(s.tee.x - 0.3, s.tee.y, s.tee.theta))
        return s

    rec = track_plan(p.states[0], p, DET, DET, MpcParams(), SeededRng(0), disturb=teleport)
    assert rec.replan and rec.t_end == 10
    assert rec.deviations[-1] > MpcParams().d_max
    rec.write(tmp_path / "trace.jsonl")
    lines = [json.loads(x) for x in (tmp_path / "trace.jsonl").read_text().splitlines()]
    assert lines[-1]["replan"] is True and {"t", "state", "actions", "deviation"} <= set(lines[-1])
    assert deviation(p.states[3], p.states[3]) == 0.0


def test_open_loop_replays_plan():
    p = push_plan()
    rec = track_plan(p.states[0], p, DET, DET, MpcParams(), SeededRng(0), open_loop=True)
    np.testing.assert_array_equal(rec.actions, p.actions)
    assert rec.states == p.states

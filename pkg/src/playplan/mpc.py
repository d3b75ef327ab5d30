"""Local plan tracking with a sampling-based controller.

Each control step fits a diagonal Gaussian over a few knot actions with the
cross-entropy method, scoring samples by how closely their world-model rollout
follows the plan's states. The first actions of the best sample are executed,
the state is observed again, and tracking stops early when it strays too far
from the plan.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .core import (
    DEFAULT_A_MAX,
    ActionChunk,
    EnvState,
    SeededRng,
    clamp_actions,
    hash64,
    serialize_state,
)
from .rewards import EmbedParams, embed, embed_batch

EPS_WEIGHT = 1e-6
# tracking sees the whole scene, pusher included
TRACK_EMBED = EmbedParams(agent_radius=0.02)


@dataclass(frozen=True)
class MpcParams:
    H_MPC: int = 4
    h_exec: int = 2
    K: int = 16
    K_zero: int = 4
    K_elite: int = 4
    N_MPC: int = 10
    sigma0: float = 0.05
    sigma_min: float = 0.005
    n_knots: int = 2
    d_max: float = 0.85
    w_track: float = 1.0
    w_a: float = 0.01
    a_max: float = DEFAULT_A_MAX

    def __post_init__(self):
        if self.n_knots < 2:
            raise ValueError("n_knots must be >= 2")
        if not self.H_MPC >= self.h_exec >= 1:
            raise ValueError("need H_MPC >= h_exec >= 1")
        if self.K < 0 or self.K_zero < 0 or self.K + self.K_zero < 1:
            raise ValueError("population must be nonempty")
        if not 1 <= self.K_elite <= self.K + self.K_zero:
            raise ValueError("K_elite must lie in [1, K + K_zero]")
        if self.N_MPC < 1:
            raise ValueError("N_MPC must be >= 1")
        if self.sigma0 < 0 or self.sigma_min < 0:
            raise ValueError("standard deviations must be nonnegative")


@dataclass
class ActionDistribution:
    """Diagonal Gaussian over knot actions; ``std`` has the same ``(n_knots, 2)`` shape as ``mean``."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.std = np.asarray(self.std, dtype=float)
        if self.mean.shape != self.std.shape:
            raise ValueError("mean and std shapes differ")

    @property
    def cov(self) -> np.ndarray:
        """Per-knot 2x2 covariance matrices (always diagonal)."""
        out = np.zeros(self.mean.shape + (2,))
        out[..., 0, 0] = self.std[..., 0] ** 2
        out[..., 1, 1] = self.std[..., 1] ** 2
        return out


@dataclass
class TrackState:
    t: int
    s_cam: EnvState
    executed: list = field(default_factory=list)
    replans: int = 0


# --------------------------------------------------------------------------- knots


def knot_times(n_knots: int, H: int) -> np.ndarray:
    """Step indices of evenly spaced knots, first at 0 and last at ``H - 1``."""
    if H == 1:
        return np.zeros(n_knots)
    return np.linspace(0.0, H - 1, n_knots)


def knots_to_actions(knots, H: int, a_max: float = DEFAULT_A_MAX, dt: float = 0.2) -> ActionChunk:
    """Piecewise-linear interpolation of knot actions at each of ``H`` steps, clamped to ``a_max``."""
    return ActionChunk(_interp_knots(np.asarray(knots, dtype=float)[None], H, a_max)[0], dt)


def _interp_knots(knots: np.ndarray, H: int, a_max: float) -> np.ndarray:
    """``(n, n_knots, 2)`` knots to ``(n, H, 2)`` clamped actions."""
    n_k = knots.shape[1]
    if n_k < 2:
        raise ValueError("need at least two knots")
    tk = knot_times(n_k, H)
    steps = np.arange(H, dtype=float)
    if H == 1:
        acts = knots[:, :1].copy()
    else:
        seg = np.minimum(np.searchsorted(tk, steps, side="right") - 1, n_k - 2)
        u = (steps - tk[seg]) / (tk[seg + 1] - tk[seg])
        acts = knots[:, seg] * (1 - u)[None, :, None] + knots[:, seg + 1] * u[None, :, None]
    return clamp_actions(acts.reshape(-1, 2), a_max).reshape(acts.shape)


def plan_knots(plan_actions: np.ndarray, t: int, H: int, n_knots: int) -> np.ndarray:
    """Plan actions read off at the knot times of the window starting at ``t``."""
    steps = t + knot_times(n_knots, H)
    idx = np.arange(len(plan_actions))
    return np.column_stack([np.interp(steps, idx, plan_actions[:, 0]),
                            np.interp(steps, idx, plan_actions[:, 1])])


def window_length(plan_len: int, t: int, H: int) -> int:
    return max(1, min(H, plan_len - t))


# --------------------------------------------------------------------------- population


def gen_population(plan, t: int, params: MpcParams, rng: SeededRng,
                   dist: ActionDistribution | None = None) -> np.ndarray:
    """``K`` knot vectors around ``dist`` (the plan's knots with ``sigma0`` if omitted)
    followed by ``K_zero`` zero-mean ones with ``sigma0``; shape ``(K + K_zero, n_knots, 2)``."""
    p = params
    if dist is None:
        H = window_length(len(plan.actions), t, p.H_MPC)
        dist = ActionDistribution(plan_knots(plan.actions, t, H, p.n_knots),
                                  np.full((p.n_knots, 2), p.sigma0))
    shape = (p.n_knots, 2)
    around = dist.mean + dist.std * rng.normal(0.0, 1.0, (p.K,) + shape)
    zero = p.sigma0 * rng.normal(0.0, 1.0, (p.K_zero,) + shape)
    return np.concatenate([around, zero])


def tracking_targets(plan, t: int, H: int, params: EmbedParams = TRACK_EMBED) -> np.ndarray:
    return embed_batch(plan.states[t + 1:t + 1 + H], None, params)


def evaluate_population(population: np.ndarray, s_cam: EnvState, plan, t: int, model,
                        params: MpcParams, rng: SeededRng, targets: np.ndarray | None = None,
                        embed_params: EmbedParams = TRACK_EMBED) -> np.ndarray:
    """Negative tracking plus action cost of each sample's rollout from ``s_cam``.

    Sample ``k`` uses world-model noise from ``SeededRng(hash64(base, k))``, so the
    result does not depend on evaluation order.
    """
    p = params
    population = np.asarray(population, dtype=float)
    if len(population) == 0:
        raise ValueError("population must be nonempty")
    H = window_length(len(plan.actions), t, p.H_MPC)
    acts = _interp_knots(population, H, p.a_max)
    if targets is None:
        targets = tracking_targets(plan, t, H, embed_params)
    base = int(rng.integers(0, 2**63))
    states = []
    for k in range(len(population)):
        states.extend(model.run(s_cam, acts[k], SeededRng(hash64(base, k))))
    E = embed_batch(states, None, embed_params).reshape(len(population), H, -1)
    track = np.linalg.norm(E - targets[None], axis=2).sum(axis=1)
    effort = np.einsum("khi,khi->k", acts, acts)
    return -(p.w_track * track + p.w_a * effort)


def cem_update(population: np.ndarray, rewards: np.ndarray, dist: ActionDistribution | None,
               K_elite: int, sigma_min: float = 0.005) -> ActionDistribution:
    """Elite-weighted mean and diagonal variance, weights shifted by the worst elite.

    Ties in reward keep the earlier sample. ``dist`` is only used for its shape.
    """
    if K_elite < 1:
        raise ValueError("K_elite must be >= 1")
    population = np.asarray(population, dtype=float)
    rewards = np.asarray(rewards, dtype=float)
    order = np.argsort(-rewards, kind="stable")[:K_elite]
    elite, R = population[order], rewards[order]
    wts = R - R.min() + EPS_WEIGHT
    wts = wts / wts.sum()
    mean = np.tensordot(wts, elite, axes=1)
    var = np.tensordot(wts, (elite - mean) ** 2, axes=1)
    std = np.sqrt(np.maximum(var, sigma_min**2))
    return ActionDistribution(mean, std)


# --------------------------------------------------------------------------- control loop


@dataclass
class StepResult:
    actions: ActionChunk
    best_knots: np.ndarray
    best_reward: float
    best_history: list


def mpc_step(track: TrackState, plan, model, params: MpcParams, rng: SeededRng,
             embed_params: EmbedParams = TRACK_EMBED) -> StepResult:
    """Optimise the window at ``track.t`` and return the first ``h_exec`` actions of the best sample.

    The sampling distribution is re-centred on the plan at every call.
    """
    p = params
    n_plan = len(plan.actions)
    if not 0 <= track.t < n_plan:
        raise ValueError("track index outside the plan")
    H = window_length(n_plan, track.t, p.H_MPC)
    targets = tracking_targets(plan, track.t, H, embed_params)
    dist = ActionDistribution(plan_knots(plan.actions, track.t, H, p.n_knots),
                              np.full((p.n_knots, 2), p.sigma0))
    best_k, best_r = None, -math.inf
    history = []
    for i in range(p.N_MPC):
        r_i = rng.child(i)
        pop = gen_population(plan, track.t, p, r_i.child(0), dist)
        R = evaluate_population(pop, track.s_cam, plan, track.t, model, p, r_i.child(1), targets, embed_params)
        k = int(np.argmax(R))
        if R[k] > best_r:
            best_k, best_r = pop[k].copy(), float(R[k])
        history.append(best_r)
        dist = cem_update(pop, R, dist, p.K_elite, p.sigma_min)
    acts = _interp_knots(best_k[None], H, p.a_max)[0]
    return StepResult(ActionChunk(acts[:min(p.h_exec, H)], plan_dt(plan)), best_k, best_r, history)


def plan_dt(plan) -> float:
    return getattr(plan, "dt", 0.2)


def deviation(s: EnvState, s_ref: EnvState, embed_params: EmbedParams = TRACK_EMBED) -> float:
    return float(np.linalg.norm(embed(s, None, embed_params) - embed(s_ref, None, embed_params)))


@dataclass
class TrackRecord:
    states: list
    actions: np.ndarray
    deviations: list
    replan: bool
    t_end: int
    events: list

    @property
    def final(self) -> EnvState:
        return self.states[-1]

    def to_jsonl(self) -> list[str]:
        lines = []
        for k, ev in enumerate(self.events):
            lines.append(json.dumps(ev))
        return lines

    def write(self, path) -> None:
        with open(path, "w") as fh:
            for line in self.to_jsonl():
                fh.write(line + "\n")


def track_plan(s0: EnvState, plan, model_exec, model_plan, params: MpcParams | None = None,
               rng: SeededRng | int = 0, disturb=None, open_loop: bool = False,
               embed_params: EmbedParams = TRACK_EMBED) -> TrackRecord:
    """Follow ``plan`` from ``s0``, executing in ``model_exec`` and optimising in ``model_plan``.

    ``disturb(t, state, rng)`` may return a replacement for the observed state
    after each executed chunk. With ``open_loop`` the plan's own actions are
    replayed chunk by chunk (deviation checks still run but never stop the replay).
    Returns early with ``replan=True`` when the observed state is farther than
    ``d_max`` from the plan's state at the same index.
    """
    p = params or MpcParams()
    rng = rng if isinstance(rng, SeededRng) else SeededRng(rng)
    exec_rng, ctrl_rng, dist_rng = rng.child(0), rng.child(1), rng.child(2)
    n_plan = len(plan.actions)
    track = TrackState(0, s0)
    states, actions, devs, events = [s0], [], [], []
    replan = False
    step = 0
    while track.t < n_plan:
        if open_loop:
            chunk = plan.actions[track.t:track.t + p.h_exec]
        else:
            chunk = mpc_step(track, plan, model_plan, p, ctrl_rng.child(step), embed_params).actions.actions
        new = model_exec.run(track.s_cam, chunk, exec_rng)
        s = new[-1]
        track.t += len(chunk)
        if disturb is not None:
            s = disturb(track.t, s, dist_rng)
            new[-1] = s
        states.extend(new)
        actions.extend(np.asarray(chunk).tolist())
        track.s_cam = s
        track.executed.append(np.asarray(chunk))
        d = deviation(s, plan.states[track.t], embed_params)
        devs.append(d)
        ev = {"t": track.t, "state": serialize_state(s), "actions": np.asarray(chunk).tolist(),
              "deviation": d, "replan": False}
        step += 1
        if d > p.d_max and not open_loop:
            ev["replan"] = True
            events.append(ev)
            replan = True
            track.replans += 1
            break
        events.append(ev)
    return TrackRecord(states, np.array(actions).reshape(-1, 2), devs, replan, track.t, events)

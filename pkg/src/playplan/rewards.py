"""Reward models: geometric pose error, occupancy-embedding distance, and a
Bradley-Terry progress energy learned from passive trajectories.

All reward objects are callables ``reward(state, action) -> float`` with a
vectorised ``batch(states, actions)``; the goal context is bound at
construction.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

from .core import (
    ChainState,
    CubesState,
    EnvState,
    Pose2,
    PushTState,
    SeededRng,
    Trajectory,
    angdist,
)
from . import _kernels as _k
from .dynamics import PushTParams, tee_rects

DEFAULT_GRID = 16


class RewardError(ValueError):
    pass


def action_cost(actions: np.ndarray, w_a: float) -> np.ndarray:
    a = np.asarray(actions, dtype=float).reshape(-1, 2)
    return w_a * np.einsum("ij,ij->i", a, a)


# --------------------------------------------------------------------------- geometric


@dataclass(frozen=True)
class GeometricGoal:
    target: Pose2 | tuple
    w_p: float = 1.0
    w_theta: float = 0.3
    w_a: float = 0.01

    def __post_init__(self):
        if min(self.w_p, self.w_theta, self.w_a) < 0:
            raise RewardError("reward weights must be nonnegative")

    @property
    def kind(self) -> str:
        return "pusht" if isinstance(self.target, Pose2) else "cubes"


def reward_geometric(s: EnvState, a, goal: GeometricGoal) -> float:
    """``-w_p * position error - w_theta * yaw error - w_a * |a|^2``.

    For cubes the position error is summed over cubes and there is no yaw term.
    """
    ax, ay = a
    ra = goal.w_a * (ax * ax + ay * ay)
    if isinstance(s, PushTState):
        if goal.kind != "pusht":
            raise RewardError("push-T state needs a Pose2 goal")
        g, t = goal.target, s.tee
        return -goal.w_p * math.hypot(t.x - g.x, t.y - g.y) - goal.w_theta * angdist(t.theta, g.theta) - ra
    if isinstance(s, CubesState):
        if goal.kind != "cubes" or len(goal.target) != len(s.cubes):
            raise RewardError("cubes state needs one target position per cube")
        err = sum(math.hypot(c.x - g[0], c.y - g[1]) for c, g in zip(s.cubes, goal.target))
        return -goal.w_p * err - ra
    raise RewardError(f"no geometric reward for {type(s).__name__}")


class GeometricReward:
    def __init__(self, goal: GeometricGoal):
        self.goal = goal

    def __call__(self, s, a) -> float:
        return reward_geometric(s, a, self.goal)

    def batch(self, states: Sequence[EnvState], actions) -> np.ndarray:
        g = self.goal
        ra = action_cost(actions, g.w_a)
        if g.kind == "pusht" and states and isinstance(states[0], PushTState):
            t = np.array([s.tee for s in states])
            gx, gy, gth = g.target
            dyaw = np.abs(np.remainder(t[:, 2] - gth + math.pi, 2 * math.pi) - math.pi)
            return -g.w_p * np.hypot(t[:, 0] - gx, t[:, 1] - gy) - g.w_theta * dyaw - ra
        return np.array([reward_geometric(s, a, g) for s, a in zip(states, actions)])


# --------------------------------------------------------------------------- embedding


@dataclass(frozen=True)
class EmbedParams:
    grid_res: int = DEFAULT_GRID
    sample_spacing: float = 0.005
    cube_radius: float = 0.03
    link_radius: float = 0.0125
    tee: PushTParams = field(default_factory=PushTParams)
    # when set, a final channel holds the pusher as a disc of this radius
    agent_radius: float | None = None


@lru_cache(maxsize=16)
def _tee_points(params: PushTParams, spacing: float) -> tuple[np.ndarray, float]:
    pts = []
    for x0, x1, y0, y1 in tee_rects(params):
        nx = max(1, round((x1 - x0) / spacing))
        ny = max(1, round((y1 - y0) / spacing))
        xs = x0 + (np.arange(nx) + 0.5) * (x1 - x0) / nx
        ys = y0 + (np.arange(ny) + 0.5) * (y1 - y0) / ny
        gx, gy = np.meshgrid(xs, ys)
        cell_area = (x1 - x0) / nx * (y1 - y0) / ny
        pts.append((np.column_stack([gx.ravel(), gy.ravel()]), cell_area))
    # both rectangles use nearly the same sample area; keep per-point weights
    xy = np.vstack([p for p, _ in pts])
    w = np.concatenate([np.full(len(p), a) for p, a in pts])
    return xy, w


@lru_cache(maxsize=16)
def _disc_points(radius: float, spacing: float) -> tuple[np.ndarray, np.ndarray]:
    n = max(2, int(math.ceil(2 * radius / spacing)))
    xs = -radius + (np.arange(n) + 0.5) * (2 * radius / n)
    gx, gy = np.meshgrid(xs, xs)
    keep = gx**2 + gy**2 <= radius**2
    xy = np.column_stack([gx[keep], gy[keep]])
    w = np.full(len(xy), math.pi * radius**2 / len(xy))
    return xy, w


def n_channels(s: EnvState) -> int:
    if isinstance(s, CubesState):
        return len(s.cubes)
    return 1


def _template(s: EnvState, p: EmbedParams):
    """Object-frame sample points and weights, plus the channel of every object."""
    if isinstance(s, PushTState):
        xy, w = _tee_points(p.tee, p.sample_spacing)
        return xy, w, np.zeros(1, dtype=np.int64)
    if isinstance(s, CubesState):
        xy, w = _disc_points(p.cube_radius, p.sample_spacing)
        return xy, w, np.arange(len(s.cubes), dtype=np.int64)
    if isinstance(s, ChainState):
        xy, w = _disc_points(p.link_radius, p.sample_spacing)
        return xy, w, np.zeros(len(s.links), dtype=np.int64)
    raise TypeError(f"not an EnvState: {type(s).__name__}")


def _frames(states: Sequence[EnvState]) -> np.ndarray:
    """``(n, k, 3)`` poses of the ``k`` objects of each state (discs get zero yaw)."""
    if isinstance(states[0], PushTState):
        return np.array([s.tee for s in states], dtype=float)[:, None, :]
    c = np.array([s.object_positions() for s in states], dtype=float)
    return np.concatenate([c, np.zeros(c.shape[:2] + (1,))], axis=2)


def _apply_mask(grid: np.ndarray, nch: int, mask) -> np.ndarray:
    if mask is None:
        return grid
    mask = list(mask)
    if not mask:
        raise RewardError("object mask must keep at least one channel")
    keep = np.zeros(nch, dtype=bool)
    keep[mask] = True
    n = grid.shape[0]
    return (grid.reshape(n, nch, -1) * keep[None, :, None]).reshape(n, -1)


def embed(s: EnvState, mask: Sequence[int] | None = None, params: EmbedParams | None = None) -> np.ndarray:
    """Per-object occupancy grids, flattened as ``channel, row (y), column (x)``.

    Channels not listed in ``mask`` are zeroed; ``None`` keeps every channel.
    With ``params.agent_radius`` set, the pusher occupies one extra last channel.
    """
    return embed_batch([s], mask, params)[0]


def embed_batch(states: Sequence[EnvState], mask=None, params: EmbedParams | None = None) -> np.ndarray:
    """Row ``i`` is ``embed(states[i])``; states must share variant and object count."""
    p = params or EmbedParams()
    states = list(states)
    if not states:
        raise RewardError("no states to embed")
    nch = n_channels(states[0])
    xy, w, obj_ch = _template(states[0], p)
    res = p.grid_res
    grid = _k.splat(_frames(states), xy, w * (res * res), obj_ch, nch, res)
    if p.agent_radius is not None:
        pxy, pw = _disc_points(p.agent_radius, p.sample_spacing)
        frames = np.array([[s.pusher.x, s.pusher.y, 0.0] for s in states])[:, None, :]
        agent = _k.splat(frames, pxy, pw * (res * res), np.zeros(1, dtype=np.int64), 1, res)
        grid = np.concatenate([grid, agent], axis=1)
        nch += 1
    return _apply_mask(grid, nch, mask)


def reward_embedding(s: EnvState, a, goal_state: EnvState, mask=None, alpha: float = 10.0,
                     w_a: float = 0.01, params: EmbedParams | None = None) -> float:
    if alpha < 0:
        raise RewardError("alpha must be nonnegative")
    ra = w_a * (a[0] * a[0] + a[1] * a[1])
    if alpha == 0:
        return -ra
    d = np.linalg.norm(embed(s, mask, params) - embed(goal_state, mask, params))
    return float(-ra - alpha * d)


class EmbeddingReward:
    """Negative scaled embedding distance to a goal state, minus action cost."""

    def __init__(self, goal_state: EnvState, mask=None, alpha: float = 10.0, w_a: float = 0.01,
                 params: EmbedParams | None = None):
        if alpha < 0:
            raise RewardError("alpha must be nonnegative")
        self.mask, self.alpha, self.w_a = mask, alpha, w_a
        self.params = params or EmbedParams()
        self.goal_emb = embed(goal_state, mask, self.params)

    def distance(self, s: EnvState) -> float:
        return float(np.linalg.norm(embed(s, self.mask, self.params) - self.goal_emb))

    def __call__(self, s, a) -> float:
        ra = self.w_a * (a[0] * a[0] + a[1] * a[1])
        return -ra if self.alpha == 0 else -ra - self.alpha * self.distance(s)

    def batch(self, states, actions) -> np.ndarray:
        ra = action_cost(actions, self.w_a)
        if self.alpha == 0:
            return -ra
        e = embed_batch(states, self.mask, self.params)
        return -ra - self.alpha * np.linalg.norm(e - self.goal_emb, axis=1)


# --------------------------------------------------------------------------- rank reward


N_QUANTILES = 101


class RankTrainingError(ValueError):
    pass


@dataclass
class RankRewardModel:
    """Affine energy ``w . [phi(s); phi(start); phi(goal)] + b`` over embeddings."""

    w: np.ndarray
    b: float = 0.0
    lr: float = 0.05
    epochs: int = 300
    mask: list | None = None
    value_lo: float = 0.0
    value_hi: float = 1.0
    heldout_accuracy: float | None = None
    layout_version: int = 1
    grid_res: int = DEFAULT_GRID
    # energies of the training states at evenly spaced quantile levels; maps energy to progress in [0, 1]
    value_quantiles: list | None = None

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=float)
        if self.w.ndim != 1 or len(self.w) % 3:
            raise ValueError("weight vector length must be 3 * embedding dimension")
        if not (np.all(np.isfinite(self.w)) and math.isfinite(self.b)):
            raise ValueError("rank model parameters must be finite")

    @classmethod
    def zeros(cls, d: int, **kw) -> "RankRewardModel":
        return cls(np.zeros(3 * d), 0.0, **kw)

    @property
    def dim(self) -> int:
        return len(self.w) // 3

    def energy_features(self, phi_s: np.ndarray, phi_start: np.ndarray, phi_goal: np.ndarray) -> np.ndarray:
        d = self.dim
        return phi_s @ self.w[:d] + phi_start @ self.w[d:2 * d] + phi_goal @ self.w[2 * d:] + self.b

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump({
                "layout_version": self.layout_version,
                "weights": self.w.tolist(),
                "bias": self.b,
                "lr": self.lr,
                "epochs": self.epochs,
                "mask": self.mask,
                "value_lo": self.value_lo,
                "value_hi": self.value_hi,
                "heldout_accuracy": self.heldout_accuracy,
                "grid_res": self.grid_res,
                "value_quantiles": self.value_quantiles,
            }, fh)

    @classmethod
    def load(cls, path) -> "RankRewardModel":
        with open(path) as fh:
            d = json.load(fh)
        return cls(np.array(d["weights"]), d["bias"], d["lr"], d["epochs"], d["mask"],
                   d["value_lo"], d["value_hi"], d.get("heldout_accuracy"), d["layout_version"], d.get("grid_res", DEFAULT_GRID),
                   d.get("value_quantiles"))


def bt_probability(f_i: float, f_j: float) -> float:
    """Bradley-Terry probability that item ``i`` ranks above item ``j``."""
    return float(1.0 / (1.0 + np.exp(f_j - f_i)))


def pair_loss_and_grad(params: np.ndarray, x_later: np.ndarray, x_earlier: np.ndarray):
    """Mean ``-log sigma(f(later) - f(earlier))`` and its gradient.

    ``params`` is ``[w; b]`` and rows of ``x_*`` are concatenated
    ``[phi(s); phi(start); phi(goal)]`` feature vectors.
    """
    w, b = params[:-1], params[-1]
    f_l = x_later @ w + b
    f_e = x_earlier @ w + b
    z = f_l - f_e
    loss = np.mean(np.logaddexp(0.0, -z))
    g = -1.0 / (1.0 + np.exp(z))  # d loss / dz
    gw = (g[:, None] * (x_later - x_earlier)).mean(axis=0)
    return loss, np.append(gw, 0.0)


def rank_reward_eval(model: RankRewardModel, s: EnvState, s_start: EnvState, s_goal: EnvState,
                     params: EmbedParams | None = None) -> float:
    params = params or EmbedParams(grid_res=model.grid_res)
    e = lambda x: embed(x, model.mask, params)  # noqa: E731
    return float(model.energy_features(e(s), e(s_start), e(s_goal)))


def _chunk_windows(trajs: Sequence[Trajectory], chunk_len: int) -> list[tuple[int, int]]:
    return [(k, t0) for k, tr in enumerate(trajs) for t0 in range(len(tr.states) - chunk_len)]


def _sample_pair_diffs(embs, windows, chunk_len, n_pairs, rng: SeededRng) -> np.ndarray:
    """``phi(later) - phi(earlier)`` for random ordered pairs inside random windows."""
    picks = rng.integers(len(windows), size=n_pairs)
    ij = rng.integers(0, chunk_len + 1, size=(n_pairs, 2))
    for m in np.flatnonzero(ij[:, 0] == ij[:, 1]):
        while ij[m, 0] == ij[m, 1]:
            ij[m] = rng.integers(0, chunk_len + 1, size=2)
    lo, hi = ij.min(axis=1), ij.max(axis=1)
    d = embs[0].shape[1]
    diffs = np.empty((n_pairs, d))
    for m, wi in enumerate(picks):
        k, t0 = windows[wi]
        diffs[m] = embs[k][t0 + hi[m]] - embs[k][t0 + lo[m]]
    return diffs


def train_rank_reward(trajs: Sequence[Trajectory], chunk_len_steps: int = 64, n_pairs: int = 20000,
                      seed: int = 0, epochs: int = 100, lr: float = 0.01, batch: int = 256,
                      l2: float = 1e-5, mask=None, holdout: float = 0.2,
                      params: EmbedParams | None = None) -> RankRewardModel:
    """Fit the energy by maximising the Bradley-Terry likelihood of temporal order.

    Pairs ``(s_i, s_j)`` are drawn from random windows of ``chunk_len_steps``
    whose first and last states are the start/goal context. Later states should
    score higher. Optimised with Adam on minibatches; a held-out split of pairs
    gives the reported ordering accuracy.

    Both states of a pair share the same context, so the context weights and
    the bias cancel in every energy difference and never receive gradient.
    Training therefore only updates the state weights; the result is the same
    as running the full ``pair_loss_and_grad`` update from zero.
    """
    p = params or EmbedParams()
    trajs = [t for t in trajs if len(t.states) > chunk_len_steps]
    if not trajs:
        raise RankTrainingError(f"no trajectory longer than chunk_len_steps={chunk_len_steps}")
    if n_pairs < 10:
        raise RankTrainingError("n_pairs must be >= 10")
    rng = SeededRng(seed)
    embs = [embed_batch(t.states, mask, p) for t in trajs]
    windows = _chunk_windows(trajs, chunk_len_steps)
    diffs = _sample_pair_diffs(embs, windows, chunk_len_steps, n_pairs, rng.child(0))
    n_hold = max(1, int(holdout * n_pairs))
    D_tr, D_ho = diffs[n_hold:], diffs[:n_hold]

    d = diffs.shape[1]
    w = np.zeros(d)
    m1 = np.zeros(d)
    m2 = np.zeros(d)
    b1, b2, eps = 0.9, 0.999, 1e-8
    shuf = rng.child(1)
    step = 0
    n = len(D_tr)
    for _ in range(epochs):
        order = shuf.generator.permutation(n)
        for s in range(0, n, batch):
            Db = D_tr[order[s:s + batch]]
            z = Db @ w
            g = (-1.0 / (1.0 + np.exp(z))) @ Db / len(Db) + l2 * w
            step += 1
            m1 = b1 * m1 + (1 - b1) * g
            m2 = b2 * m2 + (1 - b2) * g * g
            w -= lr * (m1 / (1 - b1**step)) / (np.sqrt(m2 / (1 - b2**step)) + eps)
    model = RankRewardModel(np.concatenate([w, np.zeros(2 * d)]), 0.0, lr, epochs, mask,
                            grid_res=p.grid_res)
    model.heldout_accuracy = float(np.mean(D_ho @ w > 0))
    # normalisation range for use as a planning reward
    vals = np.concatenate([E @ w for E in embs])
    model.value_lo, model.value_hi = float(np.quantile(vals, 0.01)), float(np.quantile(vals, 0.99))
    if model.value_hi <= model.value_lo:
        model.value_hi = model.value_lo + 1.0
    q = np.quantile(vals, np.linspace(0.0, 1.0, N_QUANTILES))
    if np.all(np.diff(q) > 0):
        model.value_quantiles = q.tolist()
    return model


class RankReward:
    """Learned progress energy for a fixed start/goal, mapped to [0, 1], minus action cost.

    The energy only fixes an ordering of states, so it is calibrated by its
    quantile among the training states when the model carries a quantile
    table, and by an affine map of the 1%/99% quantiles otherwise.
    """

    def __init__(self, model: RankRewardModel, s_start: EnvState, s_goal: EnvState, w_a: float = 0.01,
                 params: EmbedParams | None = None):
        self.model, self.w_a = model, w_a
        self.params = params or EmbedParams(grid_res=model.grid_res)
        d = model.dim
        e0 = embed(s_start, model.mask, self.params)
        eg = embed(s_goal, model.mask, self.params)
        self._const = float(e0 @ model.w[d:2 * d] + eg @ model.w[2 * d:] + model.b)
        self._ws = model.w[:d]
        q = model.value_quantiles
        self._q = None if q is None else np.asarray(q, dtype=float)

    def _calibrate(self, f):
        m = self.model
        if self._q is None:
            return (f - m.value_lo) / (m.value_hi - m.value_lo)
        return np.interp(f, self._q, np.linspace(0.0, 1.0, len(self._q)))

    def value(self, s: EnvState) -> float:
        return float(self.values([s])[0])

    def values(self, states) -> np.ndarray:
        e = embed_batch(states, self.model.mask, self.params)
        return self._calibrate(e @ self._ws + self._const)

    def __call__(self, s, a) -> float:
        return self.value(s) - self.w_a * (a[0] * a[0] + a[1] * a[1])

    def batch(self, states, actions) -> np.ndarray:
        return self.values(states) - action_cost(actions, self.w_a)

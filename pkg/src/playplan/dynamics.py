"""Analytic stochastic world models for planar pushing.

Every model exposes ``step(state, action, rng) -> state``. The contact model is
quasi-static: objects move only while they are penetrated by the pusher disc
(or by another object), and are pushed out along the minimal translation
vector. The T additionally turns proportionally to the torque of that push.
"""

from __future__ import annotations

import math
from concurrent.futures import Executor
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from . import _kernels as _k
from .core import (
    DEFAULT_A_MAX,
    DEFAULT_DT,
    ActionChunk,
    ChainState,
    CubesState,
    EnvState,
    Pose2,
    PushTState,
    SeededRng,
    Trajectory,
    Vec2,
    clamp_action,
    hash64,
    wrap_angle,
)

PENETRATION_TOL = 1e-6


class WorldModel(Protocol):
    history_len: int
    dt: float

    def step(self, state: EnvState, action: Sequence[float], rng: SeededRng | None) -> EnvState:
        ...


def _clip(v: float, lo: float, hi: float) -> float:
    return lo if v < lo else hi if v > hi else v


# --------------------------------------------------------------------------- push-T


@dataclass(frozen=True)
class PushTParams:
    pusher_radius: float = 0.02
    bar_size: tuple[float, float] = (0.12, 0.03)
    stem_size: tuple[float, float] = (0.03, 0.09)
    torque_gain: float = 100.0
    a_max: float = DEFAULT_A_MAX
    dt: float = DEFAULT_DT
    substep: float = 0.01
    rotation_iters: int = 4
    object_lo: float = 0.12
    object_hi: float = 0.88
    pusher_lo: float = -0.1
    pusher_hi: float = 1.1

    def __post_init__(self):
        if self.pusher_radius <= 0 or min(self.bar_size + self.stem_size) <= 0:
            raise ValueError("push-T lengths must be positive")
        if self.torque_gain < 0:
            raise ValueError("torque_gain must be nonnegative")


def tee_rects(params: PushTParams) -> tuple[tuple[float, float, float, float], ...]:
    """Bar and stem as ``(x0, x1, y0, y1)`` in the T's centroid frame.

    At heading 0 the bar is on top (+y) and the stem points down.
    """
    bw, bh = params.bar_size
    sw, sh = params.stem_size
    a_bar, a_stem = bw * bh, sw * sh
    cy = (a_bar * (sh + bh / 2) + a_stem * sh / 2) / (a_bar + a_stem)
    return (
        (-bw / 2, bw / 2, sh - cy, sh + bh - cy),
        (-sw / 2, sw / 2, -cy, sh - cy),
    )


class PushTModel:
    """Quasi-static pusher-disc / T-polygon contact."""

    history_len = 1

    def __init__(self, params: PushTParams | None = None):
        self.params = params or PushTParams()
        self.dt = self.params.dt
        self.rects = tee_rects(self.params)
        self.bound_radius = max(
            math.hypot(max(abs(x0), abs(x1)), max(abs(y0), abs(y1)))
            for x0, x1, y0, y1 in self.rects
        )
        p = self.params
        self._rects = np.array(self.rects, dtype=float)
        self._prm = np.array([p.pusher_radius, p.torque_gain, p.dt, p.a_max, p.substep,
                              p.rotation_iters, p.object_lo, p.object_hi, p.pusher_lo,
                              p.pusher_hi, self.bound_radius])

    def noise_dim(self, state) -> int:
        return 3

    def penetration(self, px, py, tx, ty, th):
        """Deepest pusher penetration, ``(depth, nx, ny, cx, cy)`` in world coordinates.

        ``n`` is the direction the T must move to separate and ``c`` the contact
        point on its boundary; ``depth <= 0`` means no contact.
        """
        return _k.tee_penetration(px, py, tx, ty, th, self._rects, self.params.pusher_radius)

    def step(self, state: PushTState, action, rng=None) -> PushTState:
        return self.run(state, [action])[0]

    def run(self, state: PushTState, actions, rng=None, noise=None, sigma=(0.0, 0.0)) -> list:
        """States after each action; ``noise`` holds standard normals per step."""
        acts = np.asarray(actions, dtype=float).reshape(-1, 2)
        if noise is None:
            noise = np.zeros((len(acts), 3))
        px, py = state.pusher
        tx, ty, th = state.tee
        out = _k.pusht_run(px, py, tx, ty, th, acts, noise, sigma[0], sigma[1], self._rects, self._prm)
        res = []
        tee = state.tee
        for row in out.tolist():
            if row[2] != tee.x or row[3] != tee.y or row[4] != tee.theta:
                tee = Pose2(row[2], row[3], wrap_angle(row[4]))
            res.append(PushTState(Vec2(row[0], row[1]), tee))
        return res


# --------------------------------------------------------------------------- cubes


@dataclass(frozen=True)
class CubesParams:
    pusher_radius: float = 0.02
    cube_radius: float = 0.03
    restitution: float = 0.0
    max_iters: int = 16
    a_max: float = DEFAULT_A_MAX
    dt: float = DEFAULT_DT
    substep: float = 0.01
    object_lo: float = 0.12
    object_hi: float = 0.88
    pusher_lo: float = -0.1
    pusher_hi: float = 1.1

    def __post_init__(self):
        if self.cube_radius <= 0 or self.pusher_radius <= 0:
            raise ValueError("radii must be positive")
        if self.restitution != 0.0:
            raise ValueError("only quasi-static contact (restitution 0) is modelled")


class CubesModel:
    """Pusher and cubes as discs; overlaps removed by positional projection."""

    history_len = 1

    def __init__(self, params: CubesParams | None = None):
        self.params = params or CubesParams()
        self.dt = self.params.dt

    def project(self, px: float, py: float, cubes: list[list[float]]) -> bool:
        """Resolve overlaps in place. Returns whether anything moved."""
        p = self.params
        rp = p.pusher_radius + p.cube_radius
        rc = 2.0 * p.cube_radius
        n = len(cubes)
        moved = False
        for _ in range(p.max_iters):
            worst = 0.0
            for c in cubes:
                dx, dy = c[0] - px, c[1] - py
                d = math.hypot(dx, dy)
                ov = rp - d
                if ov > 0.0:
                    nx, ny = (dx / d, dy / d) if d > 0.0 else (1.0, 0.0)
                    c[0] += nx * ov
                    c[1] += ny * ov
                    moved = True
                    worst = max(worst, ov)
            for i in range(n):
                a = cubes[i]
                for j in range(i + 1, n):
                    b = cubes[j]
                    dx, dy = b[0] - a[0], b[1] - a[1]
                    d = math.hypot(dx, dy)
                    ov = rc - d
                    if ov > 0.0:
                        nx, ny = (dx / d, dy / d) if d > 0.0 else (1.0, 0.0)
                        h = 0.5 * ov
                        a[0] -= nx * h
                        a[1] -= ny * h
                        b[0] += nx * h
                        b[1] += ny * h
                        moved = True
                        worst = max(worst, ov)
            if worst <= PENETRATION_TOL:
                break
        return moved

    def max_overlap(self, state: CubesState) -> float:
        p = self.params
        worst = 0.0
        for i, c in enumerate(state.cubes):
            worst = max(worst, p.pusher_radius + p.cube_radius - math.dist(c, state.pusher))
            for b in state.cubes[i + 1:]:
                worst = max(worst, 2 * p.cube_radius - math.dist(c, b))
        return worst

    def noise_dim(self, state) -> int:
        return 2 * len(state.cubes)

    def run(self, state: CubesState, actions, rng=None, noise=None, sigma=(0.0, 0.0)) -> list:
        out = []
        for i, a in enumerate(np.asarray(actions, dtype=float).reshape(-1, 2).tolist()):
            nxt = self.step(state, a)
            if noise is not None and sigma[0] > 0.0:
                cubes = list(nxt.cubes)
                for j, (old, new) in enumerate(zip(state.cubes, nxt.cubes)):
                    if old != new:
                        cubes[j] = Vec2(new.x + sigma[0] * noise[i, 2 * j],
                                        new.y + sigma[0] * noise[i, 2 * j + 1])
                nxt = CubesState(nxt.pusher, tuple(cubes))
            out.append(nxt)
            state = nxt
        return out

    def step(self, state: CubesState, action, rng=None) -> CubesState:
        p = self.params
        vx, vy = clamp_action(action, p.a_max)
        px0, py0 = state.pusher
        px1 = _clip(px0 + vx * self.dt, p.pusher_lo, p.pusher_hi)
        py1 = _clip(py0 + vy * self.dt, p.pusher_lo, p.pusher_hi)
        cubes = [list(c) for c in state.cubes]
        ex, ey = px1 - px0, py1 - py0
        n_sub = max(1, math.ceil(math.hypot(ex, ey) / p.substep))
        moved = False
        for k in range(1, n_sub + 1):
            moved |= self.project(px0 + ex * k / n_sub, py0 + ey * k / n_sub, cubes)
        if not moved:
            return CubesState(Vec2(px1, py1), state.cubes)
        for c in cubes:
            c[0] = _clip(c[0], p.object_lo, p.object_hi)
            c[1] = _clip(c[1], p.object_lo, p.object_hi)
        out = []
        for c, old in zip(cubes, state.cubes):
            v = Vec2(c[0], c[1])
            out.append(old if v == old else v)
        return CubesState(Vec2(px1, py1), tuple(out))


# --------------------------------------------------------------------------- chain


@dataclass(frozen=True)
class ChainParams:
    n_links: int = 12
    rest_length: float = 0.025
    projection_iters: int = 8
    ground_friction: float = 1.0
    pusher_radius: float = 0.02
    link_radius: float = 0.0125
    a_max: float = DEFAULT_A_MAX
    dt: float = DEFAULT_DT
    substep: float = 0.01
    spacing_tol: float = 0.15
    max_extra_iters: int = 400
    object_lo: float = 0.12
    object_hi: float = 0.88
    pusher_lo: float = -0.1
    pusher_hi: float = 1.1

    def __post_init__(self):
        if self.n_links < 2:
            raise ValueError("n_links must be >= 2")
        if self.projection_iters < 1:
            raise ValueError("projection_iters must be >= 1")
        if self.ground_friction != 1.0:
            raise ValueError("only the fully quasi-static chain (ground_friction=1) is modelled")


class ChainModel:
    """Position-based chain of discs with distance constraints between neighbours.

    Constraint projection is Jacobi-style (all corrections computed, then applied)
    so the result does not depend on link ordering.
    """

    history_len = 1

    def __init__(self, params: ChainParams | None = None):
        self.params = params or ChainParams()
        self.dt = self.params.dt
        p = self.params
        self._prm = np.array([p.rest_length, p.projection_iters, p.pusher_radius, p.link_radius,
                              p.dt, p.a_max, p.substep, p.spacing_tol, p.max_extra_iters,
                              p.object_lo, p.object_hi, p.pusher_lo, p.pusher_hi])

    def noise_dim(self, state) -> int:
        return 2

    def step(self, state: ChainState, action, rng=None) -> ChainState:
        return self.run(state, [action])[0]

    def run(self, state: ChainState, actions, rng=None, noise=None, sigma=(0.0, 0.0)) -> list:
        """States after each action; a moved chain is shifted rigidly by ``sigma[0] * noise``."""
        links = state.links_array()
        px, py = state.pusher
        cur = state.links
        out = []
        for i, (vx, vy) in enumerate(np.asarray(actions, dtype=float).reshape(-1, 2).tolist()):
            px, py, moved = _k.chain_step(px, py, links, vx, vy, self._prm)
            if moved:
                if noise is not None and sigma[0] > 0.0:
                    links += sigma[0] * noise[i, :2]
                cur = tuple(Vec2(x, y) for x, y in links.tolist())
            out.append(ChainState(Vec2(px, py), cur))
        return out

    def spacing_ok(self, links: np.ndarray, tol: float) -> bool:
        return bool(_k._spacing_ok(np.asarray(links, dtype=float), self.params.rest_length, tol))


# --------------------------------------------------------------------------- noise


@dataclass(frozen=True)
class StochasticWrapperParams:
    sigma_pos: float = 0.002
    sigma_rot: float = 0.01

    def __post_init__(self):
        if self.sigma_pos < 0 or self.sigma_rot < 0:
            raise ValueError("noise scales must be nonnegative")


class StochasticWrapper:
    """Adds Gaussian pose noise to objects that moved during a step.

    Every step consumes the same number of standard normals from the rng
    whether or not anything moved, so a chunk rolled at once matches the same
    chunk stepped one action at a time. The chain is perturbed as a rigid
    translation so its link spacing is kept. With both scales zero the wrapped
    model is reproduced exactly.
    """

    def __init__(self, base, params: StochasticWrapperParams | None = None):
        self.base = base
        self.params = params or StochasticWrapperParams()
        self.history_len = base.history_len
        self.dt = base.dt

    def step(self, state: EnvState, action, rng: SeededRng | None) -> EnvState:
        return self.run(state, [action], rng)[0]

    def run(self, state: EnvState, actions, rng: SeededRng | None) -> list:
        sp, sr = self.params.sigma_pos, self.params.sigma_rot
        acts = np.asarray(actions, dtype=float).reshape(-1, 2)
        if sp == 0.0 and sr == 0.0:
            return self.base.run(state, acts)
        if rng is None:
            raise ValueError("a stochastic world model needs an rng")
        noise = rng.normal(0.0, 1.0, (len(acts), self.base.noise_dim(state)))
        return self.base.run(state, acts, noise=noise, sigma=(sp, sr))


def make_model(kind: str, params=None, noise: StochasticWrapperParams | None = None):
    """World model for an environment tag, optionally wrapped with noise."""
    cls = {"pusht": PushTModel, "cubes": CubesModel, "chain": ChainModel}[kind]
    model = cls(params)
    if noise is not None and (noise.sigma_pos > 0 or noise.sigma_rot > 0):
        return StochasticWrapper(model, noise)
    return model


# --------------------------------------------------------------------------- rollouts


def rollout(model, s0: EnvState, actions, rng: SeededRng | None = None) -> Trajectory:
    """Apply ``actions`` one after the other starting from ``s0``."""
    arr = actions.actions if isinstance(actions, ActionChunk) else np.asarray(actions, float)
    if len(arr) == 0:
        raise ValueError("rollout needs at least one action")
    return Trajectory([s0, *model.run(s0, arr, rng)], arr, model.dt)


def rollout_batch(
    model,
    s0: EnvState,
    chunks: Sequence,
    base_seed: int,
    executor: Executor | None = None,
) -> list[Trajectory]:
    """Roll out every chunk from ``s0``; chunk ``i`` uses child seed ``hash64(base_seed, i)``."""
    if len(chunks) == 0:
        raise ValueError("rollout_batch needs at least one chunk")

    def one(i):
        return rollout(model, s0, chunks[i], SeededRng(hash64(base_seed, i)))

    if executor is None:
        return [one(i) for i in range(len(chunks))]
    return list(executor.map(one, range(len(chunks))))

"""Play-data generation and the nonparametric action prior.

Play is an Ornstein-Uhlenbeck random walk of the pusher velocity, with some
segments biased toward the nearest object so that objects actually get pushed
around. The episode is cut every ``episode_len`` steps but the scene is never
reset.

The prior stores, for every transition with enough remaining steps in its
episode, the feature vector of the state and the chunk of actions that
followed. Sampling picks one of the ``k`` nearest stored states with softmax
weights on distance and perturbs its chunk.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .core import (
    DEFAULT_A_MAX,
    ActionChunk,
    ChainState,
    CubesState,
    EnvState,
    PushTState,
    SeededRng,
    Trajectory,
    as_rng,
    clamp_actions,
    make_chain,
    make_cubes,
    make_pusht,
    read_trajectories,
    write_trajectories,
)

MIN_TRANSITIONS = 20_000


class PriorFitError(ValueError):
    pass


@dataclass(frozen=True)
class ExplorationParams:
    ou_rate: float = 0.5
    noise_scale: float = 0.15
    approach_prob: float = 0.3
    approach_speed: float = 0.2
    segment_len: int = 16
    episode_len: int = 512
    a_max: float = DEFAULT_A_MAX
    wall_margin: float = 0.03
    approach_offset: float = 0.12
    wall_zone: float = 0.2

    def __post_init__(self):
        if not 0.0 <= self.approach_prob <= 1.0:
            raise ValueError("approach_prob must lie in [0, 1]")
        if self.ou_rate < 0 or self.noise_scale < 0:
            raise ValueError("OU parameters must be nonnegative")
        if self.segment_len < 1 or self.episode_len < 1:
            raise ValueError("segment and episode lengths must be >= 1")


@dataclass
class PlayDataset:
    episodes: list[Trajectory]
    env: str
    dt: float

    @property
    def n_transitions(self) -> int:
        return sum(len(e) for e in self.episodes)

    def states(self):
        for ep in self.episodes:
            yield from ep.states

    def save(self, path) -> None:
        write_trajectories(path, self.episodes)

    @classmethod
    def load(cls, path, dt: float | None = None) -> "PlayDataset":
        from .core import DEFAULT_DT

        eps = read_trajectories(path, dt or DEFAULT_DT)
        if not eps:
            raise ValueError(f"{path}: no episodes")
        return cls(eps, eps[0].states[0].kind, eps[0].dt)


def initial_state(env: str, rng: SeededRng, n_links: int = 12, rest_length: float = 0.025) -> EnvState:
    """A random scene with objects near the board centre."""
    pusher = rng.uniform(0.1, 0.9, 2)
    if env == "pusht":
        x, y = rng.uniform(0.3, 0.7, 2)
        return make_pusht(pusher, (x, y, rng.uniform(-math.pi, math.pi)))
    if env == "cubes":
        centers = [(0.35, 0.6), (0.5, 0.4), (0.65, 0.6)]
        jit = rng.uniform(-0.05, 0.05, (3, 2))
        return make_cubes(pusher, [(cx + j[0], cy + j[1]) for (cx, cy), j in zip(centers, jit)])
    if env == "chain":
        y = rng.uniform(0.4, 0.6)
        x0 = 0.5 - rest_length * (n_links - 1) / 2
        links = [(x0 + i * rest_length, y) for i in range(n_links)]
        pusher = (rng.uniform(0.1, 0.9), rng.choice(2) * 0.6 + 0.15)
        return make_chain(pusher, links)
    raise ValueError(f"unknown environment {env!r}")


def _nearest_object(s: EnvState) -> np.ndarray:
    p = np.array(s.pusher)
    objs = np.array(s.object_positions())
    return objs[np.argmin(np.hypot(*(objs - p).T))]


def _approach_dir(obj: np.ndarray, rng: SeededRng, wall_zone: float) -> np.ndarray:
    """Side from which a biased segment approaches ``obj``.

    Random, except near a wall where the object is approached from the wall side
    so the push carries it back toward the middle of the board.
    """
    if min(obj.min(), 1.0 - obj.max()) < wall_zone:
        u = obj - 0.5
        return u / max(np.hypot(*u), 1e-9)
    a = rng.uniform(-math.pi, math.pi)
    return np.array([math.cos(a), math.sin(a)])


def gen_play(env: str, model, n_steps: int, seed: int,
             params: ExplorationParams | None = None, s0: EnvState | None = None) -> PlayDataset:
    """Generate ``n_steps`` transitions of play in ``model`` without resets."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    p = params or ExplorationParams()
    rng = SeededRng(seed)
    init_rng, noise_rng, dyn_rng = rng.child(0), rng.child(1), rng.child(2)
    s = s0 if s0 is not None else initial_state(env, init_rng)
    dt = model.dt
    v = np.zeros(2)
    lo, hi = p.wall_margin, 1.0 - p.wall_margin
    episodes: list[Trajectory] = []
    states, actions = [s], []
    biased = False
    for t in range(n_steps):
        if t % p.segment_len == 0:
            biased = noise_rng.random() < p.approach_prob
            if biased:
                obj = _nearest_object(s)
                u = _approach_dir(obj, noise_rng, p.wall_zone)
                behind = True
        v = v - p.ou_rate * v * dt + p.noise_scale * math.sqrt(dt) * noise_rng.normal(0.0, 1.0, 2)
        a = v.copy()
        if biased:
            pusher = np.array(s.pusher)
            if behind:
                d = obj + p.approach_offset * u - pusher
                if np.hypot(*d) < p.approach_offset / 2:
                    behind = False
            if not behind:
                d = -u
            n = np.hypot(*d)
            if n > 1e-9:
                a = 0.5 * a + p.approach_speed * d / n
        # keep the pusher on the board: reflect velocity at the walls
        for i in range(2):
            nxt = s.pusher[i] + a[i] * dt
            if (nxt < lo and a[i] < 0) or (nxt > hi and a[i] > 0):
                a[i] = -a[i]
                v[i] = -v[i]
        a = clamp_actions(a, p.a_max)
        s = model.step(s, a, dyn_rng)
        states.append(s)
        actions.append(a)
        if len(actions) == p.episode_len or t == n_steps - 1:
            episodes.append(Trajectory(states, np.array(actions), dt))
            states, actions = [s], []
    return PlayDataset(episodes, env, dt)


# --------------------------------------------------------------------------- prior


HEADING_SCALE = 0.1


def features(s: EnvState) -> np.ndarray:
    """Prior feature map: raw board coordinates in a fixed per-variant layout.

    Push-T: ``[pusher, tee position, 0.1 cos, 0.1 sin]``; cubes and chain:
    ``[pusher, object positions...]``.
    """
    if isinstance(s, PushTState):
        t = s.tee
        return np.array([s.pusher.x, s.pusher.y, t.x, t.y,
                         HEADING_SCALE * math.cos(t.theta), HEADING_SCALE * math.sin(t.theta)])
    if isinstance(s, (CubesState, ChainState)):
        return np.array([*s.pusher, *np.ravel(s.object_positions())])
    raise TypeError(f"not an EnvState: {type(s).__name__}")


@dataclass
class PriorModel:
    feats: np.ndarray
    chunks: np.ndarray
    k: int = 16
    h_edge: int = 8
    sigma_prior: float = 0.02
    tau_prior: float = 0.1
    a_max: float = DEFAULT_A_MAX
    dt: float = 0.2
    env: str = "pusht"
    _tree: cKDTree = field(init=False, repr=False)

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        self.feats = np.asarray(self.feats, dtype=float)
        self.chunks = np.asarray(self.chunks, dtype=float)
        self._tree = cKDTree(self.feats)

    def __len__(self) -> int:
        return len(self.feats)

    def neighbours(self, s: EnvState):
        k = min(self.k, len(self.feats))
        dist, idx = self._tree.query(features(s), k=k)
        return np.atleast_1d(dist), np.atleast_1d(idx)

    def sample(self, s: EnvState, rng: SeededRng) -> ActionChunk:
        return sample_prior(self, s, rng)

    def sample_batch(self, states, rngs) -> np.ndarray:
        return sample_prior_batch(self, states, rngs)

    def save(self, path) -> None:
        meta = dict(k=self.k, h_edge=self.h_edge, sigma_prior=self.sigma_prior,
                    tau_prior=self.tau_prior, a_max=self.a_max, dt=self.dt, env=self.env,
                    layout="v1")
        with open(path, "wb") as fh:
            np.savez(fh, feats=self.feats, chunks=self.chunks, meta=json.dumps(meta))

    @classmethod
    def load(cls, path) -> "PriorModel":
        with np.load(path) as z:
            meta = json.loads(str(z["meta"]))
            meta.pop("layout", None)
            return cls(z["feats"], z["chunks"], **meta)


def fit_prior(dataset: PlayDataset, k: int = 16, h_edge: int = 8, sigma_prior: float = 0.02,
              tau_prior: float = 0.1, a_max: float = DEFAULT_A_MAX,
              min_transitions: int = MIN_TRANSITIONS) -> PriorModel:
    """Index every transition that has ``h_edge`` actions left in its episode."""
    if h_edge < 1:
        raise PriorFitError("h_edge must be >= 1")
    if dataset.n_transitions < min_transitions:
        raise PriorFitError(
            f"play dataset has {dataset.n_transitions} transitions, need {min_transitions}")
    feats, chunks = [], []
    for ep in dataset.episodes:
        for t in range(len(ep.actions) - h_edge + 1):
            feats.append(features(ep.states[t]))
            chunks.append(ep.actions[t:t + h_edge])
    if not feats:
        raise PriorFitError(f"no episode is long enough for h_edge={h_edge}")
    return PriorModel(np.array(feats), np.array(chunks), k=k, h_edge=h_edge,
                      sigma_prior=sigma_prior, tau_prior=tau_prior, a_max=a_max,
                      dt=dataset.dt, env=dataset.env)


def _truncated_noise(rng: SeededRng, sigma: float, shape) -> np.ndarray:
    """Isotropic 2D Gaussian noise per action, rejected outside radius 3 sigma."""
    e = rng.normal(0.0, 1.0, shape)
    bad = np.hypot(e[..., 0], e[..., 1]) > 3.0
    while bad.any():
        e[bad] = rng.normal(0.0, 1.0, (int(bad.sum()), 2))
        bad = np.hypot(e[..., 0], e[..., 1]) > 3.0
    return sigma * e


def sample_prior(model: PriorModel, s: EnvState, rng: SeededRng) -> ActionChunk:
    """One perturbed chunk from a softmax-weighted neighbour of ``s``."""
    return ActionChunk(sample_prior_batch(model, [s], [rng])[0], model.dt)


def sample_prior_batch(model: PriorModel, states, rngs, clamp: bool = True) -> np.ndarray:
    """Chunks for several states at once, shape ``(n, h_edge, 2)``.

    Row ``i`` only consumes ``rngs[i]``, so it equals a single-state call.
    ``clamp=False`` returns the perturbed chunks before the action bound is applied.
    """
    k = min(model.k, len(model.feats))
    q = np.array([features(s) for s in states])
    dist, idx = model._tree.query(q, k=k)
    dist = dist.reshape(len(states), k)
    idx = idx.reshape(len(states), k)
    out = np.empty((len(states), model.h_edge, 2))
    for i, rng in enumerate(rngs):
        if k == 1:
            j = idx[i, 0]
        else:
            w = np.exp(-(dist[i] - dist[i, 0]) / model.tau_prior)
            cdf = np.cumsum(w)
            j = idx[i, min(int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right")), k - 1)]
        chunk = model.chunks[j]
        if model.sigma_prior > 0:
            chunk = chunk + _truncated_noise(rng, model.sigma_prior, chunk.shape)
        out[i] = clamp_actions(chunk, model.a_max) if clamp else chunk
    return out


class DiscretePrior:
    """A fixed set of constant action chunks standing in for the learned prior.

    In a batch, row ``i`` always gets action ``i mod n``: expansion enumerates
    the action set in order and simulation rollout ``k`` holds action ``k``.
    Used on small instances that are checked by exhaustive enumeration.
    """

    def __init__(self, actions, h_edge: int, dt: float = 0.2):
        self.actions = [np.asarray(a, dtype=float) for a in actions]
        self.h_edge = h_edge
        self.dt = dt

    def chunk(self, i: int) -> ActionChunk:
        return ActionChunk(np.tile(self.actions[i % len(self.actions)], (self.h_edge, 1)), self.dt)

    def sample(self, s, rng: SeededRng) -> ActionChunk:
        return self.chunk(int(rng.integers(len(self.actions))))

    def sample_batch(self, states, rngs) -> np.ndarray:
        return np.array([self.chunk(i).actions for i in range(len(states))])


def exploration_adequacy(dataset: PlayDataset, tol: float = 1e-9) -> float:
    """Fraction of episodes in which some object left its initial pose."""
    moved = 0
    for ep in dataset.episodes:
        first = ep.states[0].object_positions()
        moved += any(
            max(abs(a[0] - b[0]), abs(a[1] - b[1])) > tol
            for st in ep.states[1:]
            for a, b in zip(st.object_positions(), first)
        )
    return moved / len(dataset.episodes)


def params_dict(p) -> dict:
    return asdict(p)

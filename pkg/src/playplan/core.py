"""Shared geometric and trajectory types, serialization and seeded randomness.

The board is the unit square. Lengths are board-lengths (1 board-length = 1 m),
velocities are board-lengths per second and angles are radians wrapped to
(-pi, pi].
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence, Union

import numpy as np

TWO_PI = 2.0 * math.pi
DEFAULT_DT = 0.2
DEFAULT_A_MAX = 0.25
BOARD_LO = -0.1
BOARD_HI = 1.1


class Vec2(NamedTuple):
    x: float
    y: float

    def norm(self) -> float:
        return math.hypot(self.x, self.y)


# An action is a planar velocity command.
Action = Vec2


def wrap_angle(theta: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    r = math.remainder(theta, TWO_PI)
    if r <= -math.pi:
        r += TWO_PI
    return r


class Pose2(NamedTuple):
    x: float
    y: float
    theta: float

    @classmethod
    def make(cls, x: float, y: float, theta: float) -> "Pose2":
        return cls(float(x), float(y), wrap_angle(float(theta)))

    @property
    def position(self) -> Vec2:
        return Vec2(self.x, self.y)


def angdist(a: float, b: float) -> float:
    """Smallest absolute angular difference between ``a`` and ``b``, in [0, pi]."""
    return abs(wrap_angle(a - b))


def clamp_action(a: Sequence[float], a_max: float = DEFAULT_A_MAX) -> Vec2:
    """Scale ``a`` down to norm ``a_max`` if it exceeds it; direction is preserved."""
    if a_max <= 0:
        raise ValueError("a_max must be positive")
    vx, vy = float(a[0]), float(a[1])
    n = math.hypot(vx, vy)
    if n <= a_max:
        return Vec2(vx, vy)
    s = a_max / n
    return Vec2(vx * s, vy * s)


def clamp_actions(actions: np.ndarray, a_max: float = DEFAULT_A_MAX) -> np.ndarray:
    """Row-wise :func:`clamp_action` for an ``(n, 2)`` array."""
    actions = np.asarray(actions, dtype=float)
    norms = np.hypot(actions[..., 0], actions[..., 1])
    over = norms > a_max
    scale = np.ones_like(norms)
    np.divide(a_max, norms, out=scale, where=over)
    return actions * scale[..., None]


@dataclass(frozen=True)
class ActionChunk:
    """Consecutive velocity commands, ``actions`` has shape ``(n, 2)``."""

    actions: np.ndarray
    dt: float = DEFAULT_DT

    def __post_init__(self):
        arr = np.array(self.actions, dtype=float).reshape(-1, 2)
        if len(arr) == 0:
            raise ValueError("ActionChunk must be nonempty")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        arr.setflags(write=False)
        object.__setattr__(self, "actions", arr)

    def __len__(self) -> int:
        return len(self.actions)

    def __iter__(self):
        for vx, vy in self.actions:
            yield Vec2(float(vx), float(vy))

    def __eq__(self, other):
        if not isinstance(other, ActionChunk):
            return NotImplemented
        return self.dt == other.dt and np.array_equal(self.actions, other.actions)

    def __hash__(self):
        return hash((self.dt, self.actions.tobytes()))

    def check_bounds(self, a_max: float = DEFAULT_A_MAX, tol: float = 1e-12) -> bool:
        return bool(np.all(np.hypot(self.actions[:, 0], self.actions[:, 1]) <= a_max + tol))


# --------------------------------------------------------------------------- states


@dataclass(frozen=True)
class PushTState:
    pusher: Vec2
    tee: Pose2
    kind = "pusht"

    def object_positions(self) -> list[Vec2]:
        return [self.tee.position]


@dataclass(frozen=True)
class CubesState:
    pusher: Vec2
    cubes: tuple[Vec2, ...]
    kind = "cubes"

    def object_positions(self) -> list[Vec2]:
        return list(self.cubes)


@dataclass(frozen=True)
class ChainState:
    pusher: Vec2
    links: tuple[Vec2, ...]
    kind = "chain"

    def object_positions(self) -> list[Vec2]:
        return list(self.links)

    def links_array(self) -> np.ndarray:
        return np.array(self.links, dtype=float)


EnvState = Union[PushTState, CubesState, ChainState]

ENV_KINDS = ("pusht", "cubes", "chain")


def make_pusht(pusher, tee) -> PushTState:
    return PushTState(Vec2(float(pusher[0]), float(pusher[1])), Pose2.make(*tee))


def make_cubes(pusher, cubes) -> CubesState:
    return CubesState(
        Vec2(float(pusher[0]), float(pusher[1])),
        tuple(Vec2(float(c[0]), float(c[1])) for c in cubes),
    )


def make_chain(pusher, links) -> ChainState:
    return ChainState(
        Vec2(float(pusher[0]), float(pusher[1])),
        tuple(Vec2(float(p[0]), float(p[1])) for p in links),
    )


def state_vector(s: EnvState) -> np.ndarray:
    """Flat coordinate vector: pusher first, then the variant payload.

    The T heading is encoded as ``(cos, sin)`` so that the layout is continuous.
    """
    if isinstance(s, PushTState):
        t = s.tee
        return np.array(
            [s.pusher.x, s.pusher.y, t.x, t.y, math.cos(t.theta), math.sin(t.theta)]
        )
    if isinstance(s, CubesState):
        return np.array([s.pusher.x, s.pusher.y, *[v for c in s.cubes for v in c]])
    if isinstance(s, ChainState):
        return np.array([s.pusher.x, s.pusher.y, *[v for p in s.links for v in p]])
    raise TypeError(f"not an EnvState: {type(s).__name__}")


def in_board(s: EnvState, lo: float = BOARD_LO, hi: float = BOARD_HI) -> bool:
    pts = [s.pusher, *s.object_positions()]
    return all(lo <= p[0] <= hi and lo <= p[1] <= hi for p in pts)


@dataclass
class Trajectory:
    """``states[i + 1]`` results from applying ``actions[i]`` to ``states[i]``."""

    states: list
    actions: np.ndarray
    dt: float = DEFAULT_DT

    def __post_init__(self):
        self.actions = np.asarray(self.actions, dtype=float).reshape(-1, 2)
        if len(self.states) != len(self.actions) + 1:
            raise ValueError(
                f"trajectory needs len(states) == len(actions) + 1, got "
                f"{len(self.states)} and {len(self.actions)}"
            )

    def __len__(self) -> int:
        return len(self.actions)

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (
            self.dt == other.dt
            and self.states == other.states
            and np.array_equal(self.actions, other.actions)
        )

    @property
    def final(self) -> EnvState:
        return self.states[-1]


# --------------------------------------------------------------------------- randomness


def hash64(base_seed: int, index: int) -> int:
    """Order-independent child seed derivation."""
    data = struct.pack("<QQ", base_seed & 0xFFFFFFFFFFFFFFFF, index & 0xFFFFFFFFFFFFFFFF)
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


@dataclass
class SeededRng:
    """A reproducible random stream.

    Children are derived from ``(seed, index)`` only, so a batch of rollouts gets
    the same streams whatever order (or thread) they are evaluated in. Not safe
    to share between threads; hand each worker its own child.
    """

    seed: int
    counter: int = 0
    _gen: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        self.seed = int(self.seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def child(self, index: int) -> "SeededRng":
        return SeededRng(hash64(self.seed, index))

    def spawn(self) -> "SeededRng":
        """Next child in this stream's spawn sequence."""
        c = self.child(self.counter)
        self.counter += 1
        return c

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def random(self, size=None):
        return self._gen.random(size)

    def choice(self, n: int, p=None):
        return int(self._gen.choice(n, p=p))

    def bytes(self, n: int) -> bytes:
        return self._gen.bytes(n)


def as_rng(rng: SeededRng | int | None) -> SeededRng:
    if isinstance(rng, SeededRng):
        return rng
    return SeededRng(0 if rng is None else rng)


# --------------------------------------------------------------------------- serialization


class StateParseError(ValueError):
    """Raised when a record cannot be decoded; ``field`` names the culprit."""

    def __init__(self, field_name: str, msg: str):
        super().__init__(f"{field_name}: {msg}")
        self.field = field_name


def serialize_state(s: EnvState) -> dict:
    rec: dict = {"pusher": [s.pusher.x, s.pusher.y]}
    if isinstance(s, PushTState):
        rec["tee"] = [s.tee.x, s.tee.y, s.tee.theta]
    elif isinstance(s, CubesState):
        rec["cubes"] = [[c.x, c.y] for c in s.cubes]
    elif isinstance(s, ChainState):
        rec["links"] = [[p.x, p.y] for p in s.links]
    else:
        raise TypeError(f"not an EnvState: {type(s).__name__}")
    return rec


def _vec(rec: dict, name: str, value) -> Vec2:
    try:
        x, y = value
        x, y = float(x), float(y)
    except (TypeError, ValueError):
        raise StateParseError(name, f"expected [x, y], got {value!r}") from None
    if not (math.isfinite(x) and math.isfinite(y)):
        raise StateParseError(name, "non-finite coordinate")
    return Vec2(x, y)


def deserialize_state(rec: dict) -> EnvState:
    if not isinstance(rec, dict):
        raise StateParseError("record", "expected a JSON object")
    if "pusher" not in rec:
        raise StateParseError("pusher", "missing field")
    pusher = _vec(rec, "pusher", rec["pusher"])
    present = [k for k in ("tee", "cubes", "links") if k in rec]
    if len(present) != 1:
        raise StateParseError(
            "tee|cubes|links", f"exactly one payload field required, found {present}"
        )
    key = present[0]
    val = rec[key]
    if key == "tee":
        try:
            x, y, th = (float(v) for v in val)
        except (TypeError, ValueError):
            raise StateParseError("tee", f"expected [x, y, theta], got {val!r}") from None
        if not all(math.isfinite(v) for v in (x, y, th)):
            raise StateParseError("tee", "non-finite coordinate")
        return PushTState(pusher, Pose2.make(x, y, th))
    if not isinstance(val, list) or not val:
        raise StateParseError(key, "expected a nonempty list of [x, y]")
    pts = tuple(_vec(rec, f"{key}[{i}]", v) for i, v in enumerate(val))
    if key == "cubes":
        return CubesState(pusher, pts)
    return ChainState(pusher, pts)


def trajectory_records(traj: Trajectory, episode_id: int = 0) -> list[dict]:
    """One record per time step; the last state carries ``action: null``."""
    out = []
    for t, s in enumerate(traj.states):
        rec = {"episode_id": episode_id, "t": t, **serialize_state(s)}
        rec["action"] = list(map(float, traj.actions[t])) if t < len(traj.actions) else None
        out.append(rec)
    return out


def write_trajectories(path, trajs: Iterable[Trajectory]) -> None:
    with open(path, "w") as fh:
        for i, traj in enumerate(trajs):
            for rec in trajectory_records(traj, i):
                fh.write(json.dumps(rec) + "\n")


def read_trajectories(path, dt: float = DEFAULT_DT) -> list[Trajectory]:
    episodes: dict[int, list[dict]] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise StateParseError(f"line {lineno}", str(e)) from None
            for key in ("episode_id", "t"):
                if key not in rec:
                    raise StateParseError(key, f"missing field on line {lineno}")
            episodes.setdefault(int(rec["episode_id"]), []).append(rec)
    trajs = []
    for eid in sorted(episodes):
        recs = sorted(episodes[eid], key=lambda r: r["t"])
        states = [deserialize_state(r) for r in recs]
        actions = []
        for r in recs[:-1]:
            if r.get("action") is None:
                raise StateParseError("action", f"missing in episode {eid} at t={r['t']}")
            actions.append(_vec(r, "action", r["action"]))
        trajs.append(Trajectory(states, np.array(actions, dtype=float).reshape(-1, 2), dt))
    return trajs

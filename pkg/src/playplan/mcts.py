"""Monte Carlo tree search over world-model states.

Edges are action chunks drawn from the prior and rolled out in the world model;
a node's state is the last state of its edge. Leaves are scored by the best
discounted reward prefix over several prior rollouts.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .core import ActionChunk, EnvState, SeededRng, Trajectory, hash64, serialize_state


@dataclass(frozen=True)
class MctsParams:
    c: float = math.sqrt(2.0)
    B: int = 8
    h_edge: int = 8
    H_sim: int = 32
    M_sim: int = 8
    n_min: int = 5
    V_thresh: float | None = None
    max_iters: int = 2000
    gamma: float = 1.0
    # added to every per-step reward inside simulate(); 0 reproduces the plain score
    reward_offset: float = 0.0
    max_depth: int | None = None
    time_budget: float | None = None

    def __post_init__(self):
        for name in ("B", "h_edge", "H_sim", "M_sim", "max_iters"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_min < 0:
            raise ValueError("n_min must be >= 0")
        if self.c < 0:
            raise ValueError("c must be >= 0")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if self.max_depth is not None and self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")


@dataclass(eq=False)
class SearchNode:
    state: EnvState
    edge: ActionChunk | None = None
    traj: Trajectory | None = None
    parent: "SearchNode | None" = None
    V_total: float = 0.0
    n_visit: int = 0
    children: list = field(default_factory=list)
    depth: int = 0

    @property
    def mean(self) -> float:
        return self.V_total / self.n_visit if self.n_visit else 0.0

    def path(self) -> list["SearchNode"]:
        out, n = [], self
        while n is not None:
            out.append(n)
            n = n.parent
        return out[::-1]

    def iter_tree(self):
        stack = [self]
        while stack:
            n = stack.pop()
            yield n
            stack.extend(reversed(n.children))


@dataclass
class Plan:
    actions: np.ndarray
    states: list
    node_stats: list  # (mean value, n_visit) per node on the path, root excluded
    iterations: int
    found: bool = True

    def __post_init__(self):
        if len(self.states) != len(self.actions) + 1 or len(self.actions) == 0:
            raise ValueError("plan must be nonempty with len(states) == len(actions) + 1")

    def __len__(self) -> int:
        return len(self.actions)

    def to_json(self) -> dict:
        return {
            "actions": self.actions.tolist(),
            "states": [serialize_state(s) for s in self.states],
            "node_stats": [{"mean": m, "n_visit": n} for m, n in self.node_stats],
            "iterations": self.iterations,
        }

    @classmethod
    def from_json(cls, d: dict) -> "Plan":
        from .core import deserialize_state

        return cls(np.array(d["actions"], dtype=float), [deserialize_state(s) for s in d["states"]],
                   [(x["mean"], x["n_visit"]) for x in d["node_stats"]], d.get("iterations", 0))


@dataclass
class NoPlan:
    """No node was visited more than ``n_min`` times."""

    iterations: int
    reason: str = "no node exceeded n_min visits"
    found: bool = False


# --------------------------------------------------------------------------- pieces


def ucb1(node: SearchNode, parent_visits: int, c: float) -> float:
    if node.n_visit == 0:
        return math.inf
    if parent_visits < 1:
        raise ValueError("parent_visits must be >= 1")
    return node.V_total / node.n_visit + c * math.sqrt(math.log(parent_visits) / node.n_visit)


def select(root: SearchNode, c: float) -> SearchNode:
    """Descend by maximum UCB1 (first child wins ties) until a node without children."""
    node = root
    while node.children:
        N = max(node.n_visit, 1)
        best, best_u = None, -math.inf
        for ch in node.children:
            u = ucb1(ch, N, c)
            if u > best_u:
                best, best_u = ch, u
        node = best
    return node


def policy_rollouts(prior, model, s0: EnvState, n: int, horizon: int, rngs) -> tuple[list, np.ndarray]:
    """``n`` prior-driven rollouts of ``horizon`` steps, advanced in lockstep.

    Rollout ``i`` draws its chunks and its world-model noise from ``rngs[i]`` only.
    Returns per-rollout state lists and an ``(n, horizon, 2)`` action array.
    """
    states = [[s0] for _ in range(n)]
    actions = np.empty((n, horizon, 2))
    t = 0
    while t < horizon:
        chunks = prior.sample_batch([st[-1] for st in states], rngs)
        h = min(chunks.shape[1], horizon - t)
        for i in range(n):
            states[i].extend(model.run(states[i][-1], chunks[i, :h], rngs[i]))
        actions[:, t:t + h] = chunks[:, :h]
        t += h
    return states, actions


def expand(node: SearchNode, prior, model, B: int, h_edge: int, rng: SeededRng) -> list[SearchNode]:
    """Add ``B`` children reached by prior chunks rolled out from ``node.state``."""
    base = int(rng.integers(0, 2**63))
    rngs = [SeededRng(hash64(base, i)) for i in range(B)]
    states, actions = policy_rollouts(prior, model, node.state, B, h_edge, rngs)
    for i in range(B):
        traj = Trajectory(states[i], actions[i], model.dt)
        node.children.append(SearchNode(
            state=states[i][-1], edge=ActionChunk(actions[i], model.dt), traj=traj,
            parent=node, depth=node.depth + 1))
    return node.children


def simulation_score(rewards: np.ndarray, gamma: float = 1.0) -> float:
    """Best discounted prefix sum over rollouts (rows) and truncation times.

    The empty prefix counts, so the score is never negative.
    """
    r = np.atleast_2d(np.asarray(rewards, dtype=float))
    if gamma != 1.0:
        r = r * gamma ** np.arange(r.shape[1])
    return float(max(0.0, np.cumsum(r, axis=1).max())) if r.size else 0.0


def simulate(node: SearchNode, prior, model, reward, M_sim: int, H_sim: int, rng: SeededRng,
             gamma: float = 1.0, reward_offset: float = 0.0) -> float:
    """Score a node by its best reward prefix over ``M_sim`` prior rollouts.

    Step ``t`` is rewarded with ``reward(s_{t+1}, a_t)``, i.e. the state the
    action leads to.
    """
    if M_sim < 1 or H_sim < 1:
        raise ValueError("M_sim and H_sim must be >= 1")
    base = int(rng.integers(0, 2**63))
    rngs = [SeededRng(hash64(base, i)) for i in range(M_sim)]
    states, actions = policy_rollouts(prior, model, node.state, M_sim, H_sim, rngs)
    flat = [s for seq in states for s in seq[1:]]
    r = np.asarray(reward.batch(flat, actions.reshape(-1, 2)), dtype=float).reshape(M_sim, H_sim)
    return simulation_score(r + reward_offset, gamma)


def backprop(node: SearchNode, R: float) -> None:
    while node is not None:
        node.V_total += R
        node.n_visit += 1
        node = node.parent


# --------------------------------------------------------------------------- planner


@dataclass
class SearchResult:
    root: SearchNode
    iterations: int
    best: SearchNode | None
    timed_out: bool = False


def _extract(node: SearchNode, iterations: int) -> Plan:
    path = node.path()[1:]
    actions = np.concatenate([n.edge.actions for n in path])
    states = [path[0].traj.states[0]]
    for n in path:
        states.extend(n.traj.states[1:])
    return Plan(actions, states, [(n.mean, n.n_visit) for n in path], iterations)


def search(s0: EnvState, prior, model, reward, params: MctsParams, rng: SeededRng) -> SearchResult:
    p = params
    root = SearchNode(s0)
    expand(root, prior, model, p.B, p.h_edge, rng)
    deadline = None if p.time_budget is None else time.monotonic() + p.time_budget
    best = None
    it = 0
    timed_out = False
    while it < p.max_iters:
        leaf = select(root, p.c)
        if leaf.n_visit > 0 and (p.max_depth is None or leaf.depth < p.max_depth):
            leaf = expand(leaf, prior, model, p.B, p.h_edge, rng)[0]
        R = simulate(leaf, prior, model, reward, p.M_sim, p.H_sim, rng, p.gamma, p.reward_offset)
        backprop(leaf, R)
        it += 1
        if p.V_thresh is not None:
            n = leaf
            while n is not root:
                if n.n_visit > p.n_min and n.mean >= p.V_thresh:
                    best = n
                    break
                n = n.parent
            if best is not None:
                break
        if deadline is not None and time.monotonic() > deadline:
            timed_out = True
            break
    qualifying = [n for n in root.iter_tree() if n is not root and n.n_visit > p.n_min]
    if p.V_thresh is not None and best is not None:
        qualifying = [n for n in qualifying if n.mean >= p.V_thresh]
    best = max(qualifying, key=lambda n: n.mean, default=None)
    return SearchResult(root, it, best, timed_out)


def plan(s0: EnvState, prior, model, reward, params: MctsParams | None = None,
         rng: SeededRng | int = 0) -> Plan | NoPlan:
    """Run MCTS from ``s0`` and return the path to the best sufficiently visited node."""
    params = params or MctsParams()
    rng = rng if isinstance(rng, SeededRng) else SeededRng(rng)
    res = search(s0, prior, model, reward, params, rng)
    if res.best is None:
        return NoPlan(res.iterations, "timed out" if res.timed_out else NoPlan.reason)
    return _extract(res.best, res.iterations)

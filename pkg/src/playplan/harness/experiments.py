"""Experiment runners: the push-T success benchmark, the chain problem-length
study, reward monotonicity evaluation and closed-loop tracking trials."""

from __future__ import annotations

import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from ..core import Pose2, PushTState, SeededRng, Trajectory, Vec2, hash64, serialize_state, wrap_angle
from ..mcts import MctsParams, Plan, plan
from ..mpc import MpcParams, track_plan
from ..play import PlayDataset
from ..rewards import EmbeddingReward, RankRewardModel, rank_reward_eval, train_rank_reward
from .config import SEED_REWARD, SEED_STARTS, SEED_TRIALS, ExperimentConfig, make_reward
from .metrics import SuccessCriterion, chain_metrics, success_check

SUCCESS_COLUMNS = ("threshold", "success_rate", "n_trials")
CHAIN_COLUMNS = ("length", "problem_id", "iou", "coverage")


class ProblemError(ValueError):
    pass


# --------------------------------------------------------------------------- problems


def problem_from_play(dataset: PlayDataset, length_steps: int, rng: SeededRng):
    """Endpoints and actions of a uniformly drawn in-episode window of ``length_steps``."""
    if length_steps < 1:
        raise ProblemError("length_steps must be >= 1")
    counts = np.array([max(0, len(ep.actions) - length_steps + 1) for ep in dataset.episodes])
    total = int(counts.sum())
    if total == 0:
        raise ProblemError(f"no episode has {length_steps} steps")
    w = int(rng.integers(total))
    k = int(np.searchsorted(np.cumsum(counts), w, side="right"))
    t0 = w - int(counts[:k].sum())
    ep = dataset.episodes[k]
    return ep.states[t0], ep.states[t0 + length_steps], ep.actions[t0:t0 + length_steps].copy()


def glide_demo(s0: PushTState, goal: Pose2, trans_speed: float = 0.005, rot_speed: float = 0.03,
               min_steps: int = 80, lead: float = 0.0, pusher_gap: float = 0.1, dt: float = 0.2) -> Trajectory:
    """A passive demonstration of the T moving from ``s0`` to ``goal`` at bounded speed.

    With ``lead > 0`` translation runs over the first ``1 - lead`` of the demo
    and rotation over the last ``1 - lead``, so the final part turns the T in
    place; the default moves and turns together. The pusher
    trails the T along the direction of travel. Actions are the pusher
    velocities.
    """
    t0 = s0.tee
    dth = wrap_angle(goal.theta - t0.theta)
    dx, dy = goal.x - t0.x, goal.y - t0.y
    dist = math.hypot(dx, dy)
    span = 1.0 - lead
    n = max(min_steps, math.ceil(dist / (trans_speed * span)), math.ceil(abs(dth) / (rot_speed * span)))
    ux, uy = (dx / dist, dy / dist) if dist > 0 else (1.0, 0.0)
    states = []
    for k in range(n + 1):
        f = k / n
        up = min(1.0, f / span)
        ur = max(0.0, (f - lead) / span)
        x, y = t0.x + up * dx, t0.y + up * dy
        states.append(PushTState(Vec2(x - pusher_gap * ux, y - pusher_gap * uy),
                                 Pose2.make(x, y, t0.theta + ur * dth)))
    p = np.array([s.pusher for s in states])
    return Trajectory(states, np.diff(p, axis=0) / dt, dt)


def glide_demos(dataset: PlayDataset, goal: Pose2, n: int, rng: SeededRng, **kw) -> list[Trajectory]:
    states = list(dataset.states())
    return [glide_demo(states[int(rng.integers(len(states)))], goal, **kw) for _ in range(n)]


def train_pusht_rank_reward(cfg: ExperimentConfig, dataset: PlayDataset) -> RankRewardModel:
    """Rank reward trained on demonstrations that start from play states and end at the goal."""
    from ..rewards import EmbedParams

    r = cfg.reward
    rng = cfg.rng.child(SEED_REWARD)
    demos = glide_demos(dataset, cfg.goal_pose(), r.n_demos, rng.child(0))
    return train_rank_reward(demos, chunk_len_steps=r.chunk_len_steps, n_pairs=r.n_pairs,
                             seed=int(rng.child(1).integers(0, 2**62)), epochs=r.epochs, lr=r.lr,
                             mask=r.mask, params=EmbedParams(grid_res=r.grid_res))


# --------------------------------------------------------------------------- push-T benchmark


@dataclass
class TrialResult:
    trial: int
    start: dict
    found: bool
    iterations: int
    success: list
    min_translation: float | None
    min_yaw: float | None
    plan: Plan | None = None

    def record(self) -> dict:
        return {"trial": self.trial, "start": self.start, "found": self.found,
                "iterations": self.iterations, "success": self.success,
                "min_translation": self.min_translation, "min_yaw": self.min_yaw}


@dataclass
class BenchmarkResult:
    planner: str
    thresholds: tuple
    trials: list

    @property
    def n_trials(self) -> int:
        return len(self.trials)

    def success_rates(self) -> list[float]:
        s = np.array([t.success for t in self.trials], dtype=float)
        return [float(x) for x in s.mean(axis=0)]

    def rows(self) -> list[dict]:
        return [{"threshold": th, "success_rate": r, "n_trials": self.n_trials}
                for th, r in zip(self.thresholds, self.success_rates())]


def start_states(dataset: PlayDataset, n: int, rng: SeededRng) -> list:
    states = list(dataset.states())
    return [states[int(i)] for i in rng.integers(0, len(states), size=n)]


def _run_trial(args):
    i, s0, prior, model, reward, params, seed, goal, criterion, keep_plan = args
    res = plan(s0, prior, model, reward, params, SeededRng(seed))
    if not res.found:
        return TrialResult(i, serialize_state(s0), False, res.iterations,
                           [False] * len(criterion.thresholds), None, None)
    from .metrics import pose_errors

    err = pose_errors(res.states, goal)
    return TrialResult(i, serialize_state(s0), True, res.iterations, success_check(res.states, goal, criterion),
                       float(err[:, 0].min()), float(err[:, 1].min()), res if keep_plan else None)


def run_pusht_benchmark(cfg: ExperimentConfig, dataset: PlayDataset | None = None, prior=None,
                        rank_model: RankRewardModel | None = None, keep_plans: bool = False,
                        log=None) -> BenchmarkResult:
    """Plan from ``n_trials`` play-data start states and score each plan against the goal pose."""
    if cfg.env != "pusht":
        raise ValueError("the success benchmark runs on push-T")
    dataset = dataset if dataset is not None else cfg.play_dataset()
    prior = prior if prior is not None else cfg.action_prior(dataset)
    if cfg.reward.kind == "rank" and rank_model is None and not cfg.reward.model_path:
        rank_model = train_pusht_rank_reward(cfg, dataset)
    model = cfg.world_model()
    params = cfg.mcts_params()
    if cfg.trial_time_cap is not None:
        params = replace(params, time_budget=cfg.trial_time_cap)
    goal = cfg.goal_pose()
    criterion = SuccessCriterion()
    starts = start_states(dataset, cfg.n_trials, cfg.rng.child(SEED_STARTS))
    base = int(cfg.rng.child(SEED_TRIALS).integers(0, 2**63))
    jobs = [(i, s0, prior, model, make_reward(cfg, s0, cfg.goal_state(), rank_model), params,
             hash64(base, i), goal, criterion, keep_plans) for i, s0 in enumerate(starts)]
    trials = []
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as ex:
            trials = list(ex.map(_run_trial, jobs))
    else:
        for job in jobs:
            t = time.monotonic()
            trials.append(_run_trial(job))
            if log:
                r = trials[-1]
                log(f"trial {r.trial}: success {r.success} ({time.monotonic() - t:.1f}s)")
    return BenchmarkResult(f"MCTS+{cfg.reward.kind}", criterion.thresholds, trials)


def read_baselines(paths) -> list[dict]:
    import csv

    rows = []
    for p in paths:
        with open(p, newline="") as fh:
            for r in csv.DictReader(fh):
                missing = {"planner", *SUCCESS_COLUMNS} - set(r)
                if missing:
                    raise ValueError(f"{p}: missing column(s) {', '.join(sorted(missing))}")
                rows.append({"planner": r["planner"], "threshold": float(r["threshold"]),
                             "success_rate": float(r["success_rate"]), "n_trials": int(r["n_trials"])})
    return rows


def write_benchmark(result: BenchmarkResult, out_dir, cfg: ExperimentConfig | None = None) -> Path:
    from .export import write_csv

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "success.csv", SUCCESS_COLUMNS, result.rows())
    table = [{"planner": result.planner, **r} for r in result.rows()]
    if cfg is not None and cfg.baseline_files:
        table += read_baselines(cfg.baseline_files)
    write_csv(out / "table.csv", ("planner", *SUCCESS_COLUMNS), table)
    with open(out / "trials.jsonl", "w") as fh:
        for t in result.trials:
            fh.write(json.dumps(t.record(), sort_keys=True) + "\n")
    summary = {"kind": "pusht_benchmark", "planner": result.planner, "rows": result.rows()}
    if cfg is not None:
        summary["config"] = cfg.to_dict()
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return out


# --------------------------------------------------------------------------- chain study


def chain_problem_params(params: MctsParams, reward, s_start) -> MctsParams:
    """Offset the per-step reward so that staying at the start state scores zero."""
    return replace(params, reward_offset=-float(reward(s_start, (0.0, 0.0))))


def run_chain_study(cfg: ExperimentConfig, dataset: PlayDataset | None = None, prior=None,
                    log=None) -> list[dict]:
    """Rows ``(length, problem_id, iou, coverage)`` of plan terminal state against the window's end."""
    if cfg.env != "chain":
        raise ValueError("the chain study runs on the chain environment")
    dataset = dataset if dataset is not None else cfg.play_dataset()
    prior = prior if prior is not None else cfg.action_prior(dataset)
    model = cfg.world_model()
    params = cfg.mcts_params()
    r = cfg.reward
    rows = []
    root = cfg.rng.child(SEED_TRIALS)
    for L in cfg.lengths:
        for pid in range(cfg.problems_per_length):
            prng = root.child(int(L)).child(pid)
            s_start, s_goal, _ = problem_from_play(dataset, int(L), prng.child(0))
            reward = EmbeddingReward(s_goal, r.mask if r.mask is not None else [0], r.alpha, r.w_a)
            res = plan(s_start, prior, model, reward, chain_problem_params(params, reward, s_start), prng.child(1))
            terminal = res.states[-1] if res.found else s_start
            m = chain_metrics(terminal, s_goal)
            rows.append({"length": int(L), "problem_id": pid, "iou": m.iou, "coverage": m.coverage})
            if log:
                log(f"length {L} problem {pid}: iou {m.iou:.3f} coverage {m.coverage:.3f}")
    return rows


def chain_summary(rows: list[dict]) -> dict:
    out = {}
    for L in sorted({r["length"] for r in rows}):
        sel = [r for r in rows if r["length"] == L]
        out[str(L)] = {"mean_iou": float(np.mean([r["iou"] for r in sel])),
                       "mean_coverage": float(np.mean([r["coverage"] for r in sel])), "n": len(sel)}
    return out


def write_chain_study(rows: list[dict], out_dir, cfg: ExperimentConfig | None = None) -> Path:
    from .export import write_csv

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "chain.csv", CHAIN_COLUMNS, rows)
    summary = {"kind": "chain_study", "by_length": chain_summary(rows)}
    if cfg is not None:
        summary["config"] = cfg.to_dict()
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return out


# --------------------------------------------------------------------------- reward monotonicity


def spearman_or_none(values) -> float | None:
    """Rank correlation of values with time, or ``None`` for a flat curve."""
    v = np.asarray(values, dtype=float)
    if len(v) < 2 or np.ptp(v) == 0.0:
        return None
    return float(spearmanr(np.arange(len(v)), v).statistic)


def monotonicity_eval(model: RankRewardModel, trajectories, lengths, runs_per_length: int,
                      rng: SeededRng) -> dict:
    """Value-versus-progress curves on random windows, with Spearman rho per curve.

    Each window supplies its own first and last state as the start/goal context.
    Curves are min-max normalised; flat curves keep zeros and report ``rho = None``.
    """
    out = {"lengths": [], "curves": []}
    for L in sorted(int(x) for x in lengths):
        eligible = [t for t in trajectories if len(t.actions) >= L]
        rhos = []
        for run in range(runs_per_length):
            if not eligible:
                break
            r = rng.child(L).child(run)
            tr = eligible[int(r.integers(len(eligible)))]
            t0 = int(r.integers(0, len(tr.actions) - L + 1))
            seg = tr.states[t0:t0 + L + 1]
            vals = np.array([rank_reward_eval(model, s, seg[0], seg[-1]) for s in seg])
            rho = spearman_or_none(vals)
            span = np.ptp(vals)
            norm = (vals - vals.min()) / span if span > 0 else np.zeros_like(vals)
            out["curves"].append({"length": L, "run": run, "progress": np.linspace(0, 1, L + 1).tolist(),
                                  "value": norm.tolist(), "raw_value": vals.tolist(), "rho": rho})
            rhos.append(rho)
        defined = [x for x in rhos if x is not None]
        out["lengths"].append({"length": L, "n_curves": len(rhos), "n_flat": len(rhos) - len(defined),
                               "mean_rho": float(np.mean(defined)) if defined else None})
    defined = [c["rho"] for c in out["curves"] if c["rho"] is not None]
    out["mean_rho"] = float(np.mean(defined)) if defined else None
    out["heldout_accuracy"] = model.heldout_accuracy
    return out


# --------------------------------------------------------------------------- closed-loop tracking


def displace_tee(s: PushTState, dist: float, rng: SeededRng) -> PushTState:
    a = rng.uniform(-math.pi, math.pi)
    t = s.tee
    return PushTState(s.pusher, Pose2(t.x + dist * math.cos(a), t.y + dist * math.sin(a), t.theta))


def one_shot_disturbance(step_t: int, dist: float):
    """Displace the T once, at the first observation at or after plan index ``step_t``."""
    fired = []

    def disturb(t, s, rng):
        if not fired and t >= step_t:
            fired.append(t)
            return displace_tee(s, dist, rng)
        return s

    return disturb


@dataclass
class TrackingTrial:
    trial: int
    mpc_error: float
    mpc_replan: bool
    open_loop_error: float

    def mpc_success(self, tol: float) -> bool:
        return not self.mpc_replan and self.mpc_error < tol

    def open_loop_success(self, tol: float) -> bool:
        return self.open_loop_error < tol


def terminal_error(states, plan_: Plan) -> float:
    a, b = states[-1].tee, plan_.states[-1].tee
    return math.hypot(a.x - b.x, a.y - b.y)


def tracking_trial(i: int, plan_: Plan, model_exec, model_plan, params: MpcParams, seed: int,
                   displacement: float = 0.02) -> TrackingTrial:
    """Closed-loop and open-loop execution of one plan under the same noise and disturbance."""
    rng = SeededRng(seed)
    n = len(plan_.actions)
    at = int(rng.child(9).integers(n // 4, max(n // 4 + 1, (3 * n) // 4)))
    mpc = track_plan(plan_.states[0], plan_, model_exec, model_plan, params, rng,
                     disturb=one_shot_disturbance(at, displacement))
    ol = track_plan(plan_.states[0], plan_, model_exec, model_plan, params, rng,
                    disturb=one_shot_disturbance(at, displacement), open_loop=True)
    return TrackingTrial(i, terminal_error(mpc.states, plan_), mpc.replan, terminal_error(ol.states, plan_))


def teleport_tee(s: PushTState, dist: float, rng: SeededRng, lo: float = 0.12, hi: float = 0.88) -> PushTState:
    """Move the T by ``dist`` in a random direction that keeps its centre inside ``[lo, hi]``."""
    t = s.tee
    for _ in range(1000):
        a = rng.uniform(-math.pi, math.pi)
        x, y = t.x + dist * math.cos(a), t.y + dist * math.sin(a)
        if lo <= x <= hi and lo <= y <= hi:
            return PushTState(s.pusher, Pose2(x, y, t.theta))
    raise ValueError(f"no in-bounds displacement of {dist} from ({t.x:.3f}, {t.y:.3f})")


def teleport_trial(plan_: Plan, model_exec, model_plan, params: MpcParams, seed: int,
                   displacement: float = 0.25) -> tuple[bool, bool, bool]:
    """Track ``plan_`` and teleport the T at a random mid-run observation.

    Returns ``(injected, flagged, at_teleport)``: whether the run reached the
    teleport, whether the replan flag was raised at the first observation
    farther than ``d_max`` from the plan, and whether that observation was the
    teleport itself. Drift under execution noise can cross ``d_max`` first, in
    which case the run stops there and the teleport is never injected.
    """
    rng = SeededRng(seed)
    n = len(plan_.actions)
    at = int(rng.child(9).integers(n // 4, max(n // 4 + 1, (3 * n) // 4)))
    fired = []

    def disturb(t, s, r):
        if not fired and t >= at:
            fired.append(t)
            return teleport_tee(s, displacement, r)
        return s

    rec = track_plan(plan_.states[0], plan_, model_exec, model_plan, params, rng, disturb=disturb)
    beyond = [i for i, d in enumerate(rec.deviations) if d > params.d_max]
    flagged = bool(rec.replan and beyond and beyond[0] == len(rec.deviations) - 1)
    return bool(fired), flagged, bool(flagged and fired and rec.t_end == fired[0])


TRACKING_COLUMNS = ("trial", "mpc_error", "mpc_replan", "open_loop_error", "teleport_injected",
                    "teleport_replan", "replan_at_teleport")


def run_tracking_study(cfg: ExperimentConfig, plans, displacement: float = 0.02,
                       teleport: float | None = 0.25, log=None) -> list[dict]:
    """Closed-loop versus open-loop execution of each plan under execution noise and one displacement.

    The execution model uses the configured noise; the controller plans with the
    same noisy model. With ``teleport`` set, a separate run per plan displaces
    the T by that distance and records whether replanning was requested.
    """
    from .config import SEED_MPC

    model_exec = cfg.world_model()
    model_plan = cfg.world_model()
    params = cfg.mpc_params()
    base = int(cfg.rng.child(SEED_MPC).integers(0, 2**63))
    rows = []
    for i, p in enumerate(plans):
        seed = hash64(base, i)
        tr = tracking_trial(i, p, model_exec, model_plan, params, seed, displacement)
        row = {"trial": i, "mpc_error": tr.mpc_error, "mpc_replan": tr.mpc_replan,
               "open_loop_error": tr.open_loop_error, "teleport_injected": None, "teleport_replan": None,
               "replan_at_teleport": None}
        if teleport is not None:
            row["teleport_injected"], row["teleport_replan"], row["replan_at_teleport"] = teleport_trial(
                p, model_exec, model_plan, params, hash64(seed, 1), teleport)
        rows.append(row)
        if log:
            log(f"tracking {i}: closed loop {tr.mpc_error:.4f} (replan {tr.mpc_replan}), "
                f"open loop {tr.open_loop_error:.4f}")
    return rows


def write_tracking(rows: list[dict], out_dir) -> Path:
    from .export import write_csv

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "tracking.csv", TRACKING_COLUMNS, rows)
    return out

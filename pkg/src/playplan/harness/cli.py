"""Command line entry point ``playplan``."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from ..core import SeededRng, deserialize_state, serialize_state
from ..dynamics import StochasticWrapperParams, make_model
from ..mcts import Plan, plan
from ..mpc import track_plan
from ..play import PlayDataset, PriorModel, exploration_adequacy, fit_prior, gen_play
from ..rewards import RankRewardModel
from .config import SEED_MPC, SEED_PLAY, SEED_STARTS, SEED_TRIALS, ConfigError, ExperimentConfig, make_reward
from .experiments import (
    glide_demos,
    monotonicity_eval,
    run_chain_study,
    run_pusht_benchmark,
    run_tracking_study,
    start_states,
    train_pusht_rank_reward,
    write_benchmark,
    write_chain_study,
    write_tracking,
)
from .export import ExportError, export_plots, write_csv


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if getattr(args, "config", None) else ExperimentConfig()
    over = {}
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "env", None):
        over["env"] = args.env
    if getattr(args, "n_trials", None):
        over["n_trials"] = args.n_trials
    if getattr(args, "workers", None):
        over["workers"] = args.workers
    if getattr(args, "out", None):
        over["out_dir"] = args.out
    cfg = replace(cfg, **over)
    if getattr(args, "reward", None):
        cfg.reward = replace(cfg.reward, kind=args.reward)
    if getattr(args, "data", None):
        cfg.play = replace(cfg.play, dataset_path=args.data)
    if getattr(args, "prior", None):
        cfg.prior = replace(cfg.prior, prior_path=args.prior)
    if getattr(args, "model", None):
        cfg.reward = replace(cfg.reward, model_path=args.model)
    cfg.validate()
    return cfg


# --------------------------------------------------------------------------- commands


def cmd_gen_play(args) -> int:
    cfg = _config(args)
    n = args.steps or cfg.play.n_steps
    seed = int(cfg.rng.child(SEED_PLAY).integers(0, 2**62))
    ds = gen_play(cfg.env, cfg.world_model(), n, seed, cfg.exploration_obj())
    ds.save(args.out)
    _log(f"wrote {ds.n_transitions} transitions in {len(ds.episodes)} episodes to {args.out} "
         f"(exploration adequacy {exploration_adequacy(ds):.2f})")
    return 0


def cmd_fit_prior(args) -> int:
    cfg = _config(args)
    p = cfg.prior
    prior = fit_prior(PlayDataset.load(args.data), k=p.k, h_edge=p.h_edge, sigma_prior=p.sigma_prior,
                      tau_prior=p.tau_prior)
    prior.save(args.out)
    _log(f"indexed {len(prior)} chunks into {args.out}")
    return 0


def cmd_train_reward(args) -> int:
    cfg = _config(args)
    model = train_pusht_rank_reward(cfg, cfg.play_dataset())
    model.save(args.out)
    _log(f"held-out ordering accuracy {model.heldout_accuracy:.3f}; wrote {args.out}")
    return 0


def cmd_plan(args) -> int:
    cfg = _config(args)
    ds = cfg.play_dataset()
    prior = cfg.action_prior(ds)
    if args.start:
        s0 = deserialize_state(json.loads(Path(args.start).read_text()))
    else:
        s0 = start_states(ds, 1, cfg.rng.child(SEED_STARTS))[0]
    rank_model = None
    if cfg.reward.kind == "rank" and not cfg.reward.model_path:
        rank_model = train_pusht_rank_reward(cfg, ds)
    goal = None
    if args.goal:
        goal = deserialize_state(json.loads(Path(args.goal).read_text()))
    reward = make_reward(cfg, s0, goal, rank_model)
    res = plan(s0, prior, cfg.world_model(), reward, cfg.mcts_params(), cfg.rng.child(SEED_TRIALS))
    if not res.found:
        _log(f"no plan found after {res.iterations} iterations: {res.reason}")
        return 2
    Path(args.out).write_text(json.dumps(res.to_json()) + "\n")
    _log(f"plan of {len(res)} steps after {res.iterations} iterations written to {args.out}")
    return 0


def cmd_mpc_run(args) -> int:
    cfg = _config(args)
    p = Plan.from_json(json.loads(Path(args.plan).read_text()))
    env = p.states[0].kind
    params = cfg.env_params_obj() if env == cfg.env else None
    noise = cfg.noise_obj() or StochasticWrapperParams(0.0, 0.0)
    exec_noise = StochasticWrapperParams(args.disturb, noise.sigma_rot if args.disturb > 0 else 0.0)
    model_exec = make_model(env, params, exec_noise)
    model_plan = make_model(env, params, cfg.noise_obj())
    disturb = None
    if args.displace:
        from .experiments import one_shot_disturbance

        disturb = one_shot_disturbance(len(p.actions) // 2, args.displace)
    rec = track_plan(p.states[0], p, model_exec, model_plan, cfg.mpc_params(), cfg.rng.child(SEED_MPC),
                     disturb=disturb)
    rec.write(args.out)
    _log(f"tracked to plan index {rec.t_end}/{len(p.actions)}; replan requested: {rec.replan}; "
         f"trace in {args.out}")
    return 3 if rec.replan else 0


def cmd_bench_pusht(args) -> int:
    cfg = _config(args)
    ds = cfg.play_dataset()
    prior = cfg.action_prior(ds)
    res = run_pusht_benchmark(cfg, ds, prior, keep_plans=bool(args.track), log=_log)
    out = write_benchmark(res, cfg.out_dir, cfg)
    for r in res.rows():
        print(f"threshold {r['threshold']:g}: success {100 * r['success_rate']:.1f}% of {r['n_trials']}")
    if args.track:
        plans = [t.plan for t in res.trials if t.plan is not None][: args.track]
        rows = run_tracking_study(cfg, plans, log=_log)
        write_tracking(rows, out)
    return 0


def cmd_bench_chain(args) -> int:
    cfg = _config(args)
    if cfg.env != "chain":
        cfg = replace(cfg, env="chain", env_params={})
    if cfg.reward.kind == "geometric":
        cfg.reward = replace(cfg.reward, kind="embed")
    rows = run_chain_study(cfg, log=_log)
    write_chain_study(rows, cfg.out_dir, cfg)
    from .experiments import chain_summary

    for L, v in chain_summary(rows).items():
        print(f"length {L}: mean coverage {v['mean_coverage']:.3f}, mean IoU {v['mean_iou']:.3f}")
    return 0


def cmd_eval_reward(args) -> int:
    cfg = _config(args)
    ds = cfg.play_dataset()
    model = RankRewardModel.load(cfg.reward.model_path) if cfg.reward.model_path else \
        train_pusht_rank_reward(cfg, ds)
    # held-out demonstrations come from a separate seed stream
    demos = glide_demos(ds, cfg.goal_pose(), cfg.runs_per_length, cfg.rng.child(SEED_MPC).child(0))
    ev = monotonicity_eval(model, demos, cfg.eval_lengths, cfg.runs_per_length, cfg.rng.child(SEED_MPC).child(1))
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "value_curves.json").write_text(json.dumps(ev, sort_keys=True) + "\n")
    write_csv(out / "value_rho.csv", ("length", "run", "rho"), ev["curves"])
    for row in ev["lengths"]:
        rho = "undefined" if row["mean_rho"] is None else f"{row['mean_rho']:.3f}"
        print(f"length {row['length']}: mean rho {rho} ({row['n_flat']} flat)")
    print(f"held-out ordering accuracy {ev['heldout_accuracy']:.3f}")
    return 0


def cmd_export(args) -> int:
    for p in export_plots(args.dir, args.out):
        print(p)
    return 0


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="playplan", description="Planning from play data in planar pushing tasks.")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, help_, seed_required=False, config=True):
        p = sub.add_parser(name, help=help_)
        if config:
            p.add_argument("--config", help="experiment configuration JSON")
            p.add_argument("--seed", type=int, required=seed_required, help="experiment seed")
        p.set_defaults(func=fn)
        return p

    p = add("gen-play", cmd_gen_play, "generate a play dataset (JSON Lines)")
    p.add_argument("--env", choices=["pusht", "cubes", "chain"])
    p.add_argument("--steps", type=int)
    p.add_argument("--out", required=True)

    p = add("fit-prior", cmd_fit_prior, "index a play dataset as an action prior")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = add("train-reward", cmd_train_reward, "train the rank reward on demonstrations")
    p.add_argument("--data")
    p.add_argument("--out", required=True)

    p = add("plan", cmd_plan, "plan from one start state")
    p.add_argument("--env", choices=["pusht", "cubes", "chain"])
    p.add_argument("--reward", choices=["geometric", "embed", "rank"])
    p.add_argument("--data")
    p.add_argument("--prior")
    p.add_argument("--model", help="trained rank reward JSON")
    p.add_argument("--start", help="start state JSON (default: a play-data state)")
    p.add_argument("--goal", help="goal state JSON for the embedding and rank rewards")
    p.add_argument("--out", required=True)

    p = add("mpc-run", cmd_mpc_run, "track a plan with the closed-loop controller")
    p.add_argument("--plan", required=True)
    p.add_argument("--disturb", type=float, default=0.002, help="execution position noise std")
    p.add_argument("--displace", type=float, default=0.0, help="one-time object displacement mid-run")
    p.add_argument("--out", required=True)

    p = add("bench-pusht", cmd_bench_pusht, "push-T success-rate benchmark", seed_required=True)
    p.add_argument("--reward", choices=["geometric", "embed", "rank"])
    p.add_argument("--n-trials", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--data")
    p.add_argument("--prior")
    p.add_argument("--model")
    p.add_argument("--track", type=int, default=0, help="also run closed-loop tracking on this many plans")
    p.add_argument("--out")

    p = add("bench-chain", cmd_bench_chain, "chain problem-length study", seed_required=True)
    p.add_argument("--data")
    p.add_argument("--prior")
    p.add_argument("--out")

    p = add("eval-reward", cmd_eval_reward, "rank reward monotonicity curves")
    p.add_argument("--data")
    p.add_argument("--model")
    p.add_argument("--out")

    p = add("export", cmd_export, "render figures from an experiment directory", config=False)
    p.add_argument("--dir", required=True)
    p.add_argument("--out")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ExportError, ValueError, OSError) as e:
        print(f"playplan {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

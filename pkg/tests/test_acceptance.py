"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line."""

import time

import numpy as np
import pytest
from scipy.spatial import cKDTree

from playplan.core import SeededRng
from playplan.dynamics import PushTModel
from playplan.harness.config import SEED_MPC, ExperimentConfig
from playplan.harness.experiments import (
    chain_summary,
    glide_demos,
    monotonicity_eval,
    run_chain_study,
    run_pusht_benchmark,
    run_tracking_study,
    train_pusht_rank_reward,
    write_benchmark,
)
from playplan.mcts import SearchNode, simulate
from playplan.play import DiscretePrior, sample_prior_batch
from playplan.rewards import pair_loss_and_grad
from test_mcts import S0, TableReward, brute_force_score, check_small_instance
from test_mpc import cem_quadratic
from test_rewards import _numeric_grad

pytestmark = pytest.mark.acceptance

SEED = 0


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail, t0):
        with capsys.disabled():
            print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'}: {detail} ({time.monotonic() - t0:.1f}s)")
    return emit


@pytest.fixture(scope="session")
def pusht_cfg():
    return ExperimentConfig(seed=SEED, n_trials=100)


@pytest.fixture(scope="session")
def pusht_setup(pusht_cfg):
    ds = pusht_cfg.play_dataset()
    return ds, pusht_cfg.action_prior(ds)


@pytest.fixture(scope="session")
def geometric_benchmark(pusht_cfg, pusht_setup):
    ds, prior = pusht_setup
    return run_pusht_benchmark(pusht_cfg, ds, prior, keep_plans=True)


def test_criterion_1_simulation_score_oracle(report):
    t0 = time.monotonic()
    rng = np.random.default_rng(SEED)
    prior = DiscretePrior([(0.0, 0.0)], h_edge=4)
    model = PushTModel()
    mismatches = 0
    for _ in range(100):
        M, H = int(rng.integers(1, 9)), int(rng.integers(1, 33))
        table = rng.normal(0, 1, (M, H))
        got = simulate(SearchNode(S0), prior, model, TableReward(table), M, H, SeededRng(1))
        mismatches += got != brute_force_score(table)
    ok = mismatches == 0
    report(1, ok, f"{100 - mismatches}/100 reward tables match the brute-force score exactly", t0)
    assert ok


def test_criterion_2_small_instance_optimality(report):
    t0 = time.monotonic()
    hits = sum(check_small_instance(seed) for seed in range(20))
    ok = hits == 20
    report(2, ok, f"{hits}/20 seeds match exhaustive enumeration", t0)
    assert ok


def test_criterion_3_pusht_benchmark(report, pusht_cfg, pusht_setup, geometric_benchmark, tmp_path):
    t0 = time.monotonic()
    ds, prior = pusht_setup
    geo = geometric_benchmark.success_rates()
    rank_cfg = pusht_cfg.with_overrides(reward={**vars(pusht_cfg.reward), "kind": "rank"})
    rank = run_pusht_benchmark(rank_cfg, ds, prior).success_rates()
    write_benchmark(geometric_benchmark, tmp_path / "geometric", pusht_cfg)
    monotone = all(a <= b for a, b in zip(geo, geo[1:]))
    ok_geo = geo[-1] >= 0.8 and monotone
    ok_rank = rank[-1] >= geo[-1] - 0.05
    ok = ok_geo and ok_rank
    fmt = lambda r: "/".join(f"{100 * x:.0f}" for x in r)  # noqa: E731
    report(3, ok, f"geometric {fmt(geo)}% (monotone {monotone}), rank {fmt(rank)}% at thresholds "
                  f"0.025/0.05/0.075/0.1; need geometric >= 80% and rank >= geometric - 5 at 0.1", t0)
    assert ok


def test_criterion_4_rank_reward_monotonicity(report, pusht_cfg, pusht_setup):
    t0 = time.monotonic()
    ds, _ = pusht_setup
    model = train_pusht_rank_reward(pusht_cfg, ds)
    rng = pusht_cfg.rng.child(SEED_MPC)
    demos = glide_demos(ds, pusht_cfg.goal_pose(), 10, rng.child(0))
    ev = monotonicity_eval(model, demos, pusht_cfg.eval_lengths, 10, rng.child(1))
    rho = ev["mean_rho"]
    acc = model.heldout_accuracy
    ok = len(pusht_cfg.eval_lengths) == 6 and rho is not None and rho >= 0.9 and acc >= 0.9
    report(4, ok, f"mean Spearman rho {rho:.3f} over {len(ev['curves'])} curves, held-out accuracy {acc:.3f}", t0)
    assert ok


def test_criterion_5_bt_gradient(report):
    t0 = time.monotonic()
    rng = np.random.default_rng(SEED)
    worst = 0.0
    for _ in range(100):
        d = 3 * int(rng.integers(1, 8))
        params = rng.normal(0, 1, d + 1)
        xl, xe = rng.normal(0, 1, (8, d)), rng.normal(0, 1, (8, d))
        g = pair_loss_and_grad(params, xl, xe)[1]
        num = _numeric_grad(lambda p: pair_loss_and_grad(p, xl, xe)[0], params)
        worst = max(worst, np.linalg.norm(g - num) / max(np.linalg.norm(g), np.linalg.norm(num), 1e-12))
    ok = worst <= 1e-5
    report(5, ok, f"worst relative gradient error {worst:.2e} over 100 draws", t0)
    assert ok


def test_criterion_6_cem_convergence(report):
    t0 = time.monotonic()
    errs = [np.linalg.norm(np.subtract(*cem_quadratic(seed, iters=50))) for seed in range(20)]
    hits = sum(e <= 1e-2 for e in errs)
    ok = hits == 20
    report(6, ok, f"{hits}/20 seeds within 1e-2 of the optimum (worst {max(errs):.2e})", t0)
    assert ok


def test_criterion_7_closed_loop_tracking(report, pusht_cfg, geometric_benchmark):
    t0 = time.monotonic()
    plans = [t.plan for t in geometric_benchmark.trials if t.plan is not None][:50]
    rows = run_tracking_study(pusht_cfg, plans)
    n = len(rows)
    mpc = sum(not r["mpc_replan"] and r["mpc_error"] < 0.05 for r in rows)
    open_loop = sum(r["open_loop_error"] < 0.05 for r in rows)
    flagged = sum(r["teleport_replan"] for r in rows)
    injected = sum(r["teleport_injected"] for r in rows)
    at_teleport = sum(r["replan_at_teleport"] for r in rows)
    ok = n == 50 and mpc >= 0.7 * n and mpc > open_loop and flagged == n and at_teleport == injected
    report(7, ok, f"closed loop {mpc}/{n}, open loop {open_loop}/{n}; replan flag at the first d_max crossing "
                  f"{flagged}/{n}, at the teleport itself {at_teleport}/{injected} injected "
                  f"({n - injected} runs drifted past d_max before the teleport)", t0)
    assert ok


def test_criterion_8_chain_study(report):
    t0 = time.monotonic()
    cfg = ExperimentConfig(env="chain", seed=SEED, problems_per_length=30, lengths=[16, 32, 64],
                           mcts={"max_iters": 1000, "c": 0.5})
    rows = run_chain_study(cfg)
    summ = chain_summary(rows)
    cov = [summ[str(L)]["mean_coverage"] for L in (16, 32, 64)]
    decreasing = all(a > b for a, b in zip(cov, cov[1:]))
    iou_ok = all(r["iou"] <= r["coverage"] for r in rows)
    ok = decreasing and iou_ok and len(rows) == 90
    report(8, ok, "mean coverage " + ", ".join(f"L={L}: {c:.3f}" for L, c in zip((16, 32, 64), cov))
           + f"; IoU <= coverage on all {len(rows)} problems: {iou_ok}", t0)
    assert ok


def test_criterion_9_determinism_and_prior_support(report, pusht_setup, tmp_path):
    t0 = time.monotonic()
    ds, prior = pusht_setup
    cfg = ExperimentConfig(seed=SEED, n_trials=3, mcts={"max_iters": 100, "reward_offset": 1.5, "c": 0.5})
    blobs = []
    for run in ("a", "b"):
        out = write_benchmark(run_pusht_benchmark(cfg, ds, prior), tmp_path / run, cfg)
        blobs.append({n: (out / n).read_bytes() for n in ("success.csv", "table.csv", "trials.jsonl",
                                                           "summary.json")})
    identical = blobs[0] == blobs[1]

    states = list(ds.states())
    g = np.random.default_rng(SEED)
    picks = [states[i] for i in g.integers(0, len(states), 10_000)]
    raw = sample_prior_batch(prior, picks, [SeededRng(i) for i in range(10_000)], clamp=False)
    tree = cKDTree(np.concatenate([e.actions for e in ds.episodes]))
    dist, _ = tree.query(raw.reshape(-1, 2))
    bound = 3 * prior.sigma_prior
    ok = identical and dist.max() <= bound + 1e-12
    report(9, ok, f"repeated benchmark byte-identical: {identical}; max distance of 10000 pre-clamp samples "
                  f"to a play action {dist.max():.4f} (bound {bound:.4f})", t0)
    assert ok

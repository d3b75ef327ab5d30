import numpy as np
import pytest

from playplan.core import Pose2, PushTState, SeededRng, Vec2
from playplan.dynamics import make_model
from playplan.play import (
    ExplorationParams,
    PlayDataset,
    PriorFitError,
    PriorModel,
    exploration_adequacy,
    features,
    fit_prior,
    gen_play,
    sample_prior,
    sample_prior_batch,
)


def test_gen_play_episode_cut():
    ds = gen_play("pusht", make_model("pusht"), 512, 0)
    assert len(ds.episodes) == 1 and ds.n_transitions == 512
    ds = gen_play("pusht", make_model("pusht"), 1100, 0)
    assert [len(e) for e in ds.episodes] == [512, 512, 76]
    # no resets: each episode starts where the previous one ended
    assert ds.episodes[1].states[0] == ds.episodes[0].states[-1]


def test_gen_play_ou_fixed_point():
    p = ExplorationParams(noise_scale=0.0, approach_prob=0.0)
    ds = gen_play("cubes", make_model("cubes"), 300, 3, p)
    assert np.all(ds.episodes[0].actions == 0.0)


@pytest.mark.parametrize("env", ["pusht", "cubes", "chain"])
def test_gen_play_bounds_and_adequacy(env):
    ds = gen_play(env, make_model(env), 20_000, 1)
    assert ds.n_transitions == 20_000
    acts = np.concatenate([e.actions for e in ds.episodes])
    assert np.all(np.hypot(acts[:, 0], acts[:, 1]) <= 0.25 + 1e-12)
    assert exploration_adequacy(ds) >= 0.5


def test_play_dataset_round_trip(tmp_path, pusht_play):
    small = PlayDataset(pusht_play.episodes[:2], "pusht", 0.2)
    small.save(tmp_path / "d.jsonl")
    back = PlayDataset.load(tmp_path / "d.jsonl")
    assert back.episodes == small.episodes and back.env == "pusht"


def test_fit_prior_boundaries(pusht_play):
    assert len(fit_prior(pusht_play)) > 0
    short = PlayDataset(pusht_play.episodes[:3], "pusht", 0.2)
    with pytest.raises(PriorFitError):
        fit_prior(short)
    with pytest.raises(PriorFitError):
        fit_prior(pusht_play, h_edge=600)


def test_nearest_neighbour_identity(pusht_play):
    prior = fit_prior(pusht_play, k=1, sigma_prior=0.0)
    ep = pusht_play.episodes[4]
    t = 100
    chunk = sample_prior(prior, ep.states[t], SeededRng(0))
    np.testing.assert_array_equal(chunk.actions, ep.actions[t:t + prior.h_edge])


def _two_mode_prior():
    s = PushTState(Vec2(0.3, 0.3), Pose2(0.5, 0.5, 0.0))
    f = features(s)
    feats = np.array([f, f])
    chunks = np.array([np.tile([0.2, 0.0], (8, 1)), np.tile([-0.2, 0.0], (8, 1))])
    return s, PriorModel(feats, chunks, k=2, sigma_prior=0.0)


def test_prior_multimodality():
    s, prior = _two_mode_prior()
    xs = np.array([sample_prior(prior, s, SeededRng(i)).actions[0, 0] for i in range(1000)])
    assert set(np.unique(xs)) == {-0.2, 0.2}
    ratio = np.mean(xs > 0)
    assert 0.35 <= ratio <= 0.65


def test_prior_samples_in_bounds_and_deterministic(pusht_play, pusht_prior):
    states = list(pusht_play.episodes[2].states[:50])
    a = sample_prior_batch(pusht_prior, states, [SeededRng(i) for i in range(50)])
    b = sample_prior_batch(pusht_prior, states, [SeededRng(i) for i in range(50)])
    np.testing.assert_array_equal(a, b)
    assert np.all(np.hypot(a[..., 0], a[..., 1]) <= 0.25 + 1e-12)
    single = sample_prior(pusht_prior, states[7], SeededRng(7)).actions
    np.testing.assert_array_equal(single, a[7])


def test_prior_save_load(tmp_path, pusht_prior):
    pusht_prior.save(tmp_path / "p.npz")
    back = PriorModel.load(tmp_path / "p.npz")
    np.testing.assert_array_equal(back.chunks, pusht_prior.chunks)
    assert (back.k, back.h_edge, back.sigma_prior, back.tau_prior) == \
        (pusht_prior.k, pusht_prior.h_edge, pusht_prior.sigma_prior, pusht_prior.tau_prior)


def test_prior_unclamped_noise_within_three_sigma():
    s, prior = _two_mode_prior()
    prior = PriorModel(prior.feats, prior.chunks, k=2, sigma_prior=0.05)
    raw = sample_prior_batch(prior, [s] * 200, [SeededRng(i) for i in range(200)], clamp=False)
    d = np.minimum(np.hypot(raw[..., 0] - 0.2, raw[..., 1]), np.hypot(raw[..., 0] + 0.2, raw[..., 1]))
    assert d.max() <= 3 * 0.05 + 1e-12

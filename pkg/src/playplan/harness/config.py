"""Experiment configuration: one JSON file describing every component."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from ..core import Pose2, PushTState, SeededRng, Vec2
from ..dynamics import ChainParams, CubesParams, PushTParams, StochasticWrapperParams, make_model
from ..mcts import MctsParams
from ..mpc import MpcParams
from ..play import ExplorationParams, PlayDataset, PriorModel, fit_prior, gen_play
from ..rewards import (
    EmbedParams,
    EmbeddingReward,
    GeometricGoal,
    GeometricReward,
    RankReward,
    RankRewardModel,
)

ENV_PARAMS = {"pusht": PushTParams, "cubes": CubesParams, "chain": ChainParams}
REWARD_KINDS = ("geometric", "embed", "rank")

# child indices of the experiment seed, one per consumer
SEED_PLAY, SEED_STARTS, SEED_TRIALS, SEED_REWARD, SEED_MPC = 0, 1, 2, 3, 4


class ConfigError(ValueError):
    pass


@dataclass
class PlayConfig:
    n_steps: int = 20_000
    exploration: dict = field(default_factory=dict)
    dataset_path: str | None = None


@dataclass
class PriorConfig:
    k: int = 16
    h_edge: int = 8
    sigma_prior: float = 0.02
    tau_prior: float = 0.1
    prior_path: str | None = None


@dataclass
class RewardConfig:
    kind: str = "geometric"
    # push-T goal pose
    goal: list = field(default_factory=lambda: [0.5, 0.5, 0.0])
    w_p: float = 1.0
    w_theta: float = 0.3
    w_a: float = 0.01
    alpha: float = 10.0
    mask: list | None = None
    model_path: str | None = None
    # training of the rank reward when no model file is given
    n_demos: int = 300
    chunk_len_steps: int = 64
    n_pairs: int = 40_000
    epochs: int = 100
    lr: float = 0.01
    grid_res: int = 32


@dataclass
class ExperimentConfig:
    env: str = "pusht"
    env_params: dict = field(default_factory=dict)
    noise: dict | None = field(default_factory=lambda: {"sigma_pos": 0.002, "sigma_rot": 0.01})
    play: PlayConfig = field(default_factory=PlayConfig)
    prior: PriorConfig = field(default_factory=PriorConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    mcts: dict = field(default_factory=lambda: {"max_iters": 2000, "reward_offset": 1.5, "c": 0.5})
    mpc: dict = field(default_factory=dict)
    n_trials: int = 100
    seed: int = 0
    out_dir: str = "runs/experiment"
    trial_time_cap: float = 120.0
    baseline_files: list = field(default_factory=list)
    workers: int = 1
    # chain study
    lengths: list = field(default_factory=lambda: [16, 32, 64])
    problems_per_length: int = 30
    # reward evaluation
    eval_lengths: list = field(default_factory=lambda: [8, 16, 24, 32, 48, 64])
    runs_per_length: int = 10

    def __post_init__(self):
        if isinstance(self.play, dict):
            self.play = _build(PlayConfig, self.play, "play")
        if isinstance(self.prior, dict):
            self.prior = _build(PriorConfig, self.prior, "prior")
        if isinstance(self.reward, dict):
            self.reward = _build(RewardConfig, self.reward, "reward")
        self.validate()

    # ------------------------------------------------------------------ checks
    def validate(self) -> None:
        if self.env not in ENV_PARAMS:
            raise ConfigError(f"env: unknown environment {self.env!r}")
        if self.reward.kind not in REWARD_KINDS:
            raise ConfigError(f"reward.kind: must be one of {REWARD_KINDS}")
        if self.n_trials < 1:
            raise ConfigError("n_trials: must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers: must be >= 1")
        if self.trial_time_cap is not None and self.trial_time_cap <= 0:
            raise ConfigError("trial_time_cap: must be positive")
        # building each sub-config runs its own validation
        self.env_params_obj()
        self.noise_obj()
        self.exploration_obj()
        self.mcts_params()
        self.mpc_params()

    def env_params_obj(self):
        return _build(ENV_PARAMS[self.env], self.env_params, "env_params")

    def noise_obj(self) -> StochasticWrapperParams | None:
        return None if self.noise is None else _build(StochasticWrapperParams, self.noise, "noise")

    def exploration_obj(self) -> ExplorationParams:
        return _build(ExplorationParams, self.play.exploration, "play.exploration")

    def mcts_params(self) -> MctsParams:
        d = dict(self.mcts)
        d.setdefault("h_edge", self.prior.h_edge)
        return _build(MctsParams, d, "mcts")

    def mpc_params(self) -> MpcParams:
        return _build(MpcParams, self.mpc, "mpc")

    # ------------------------------------------------------------------ io
    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return _build(cls, d, "config")

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                d = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def with_overrides(self, **kw) -> "ExperimentConfig":
        return replace(self, **kw)

    @property
    def rng(self) -> SeededRng:
        return SeededRng(self.seed)

    # ------------------------------------------------------------------ builders
    def world_model(self, noisy: bool = True):
        return make_model(self.env, self.env_params_obj(), self.noise_obj() if noisy else None)

    def play_dataset(self) -> PlayDataset:
        if self.play.dataset_path:
            return PlayDataset.load(self.play.dataset_path)
        seed = int(self.rng.child(SEED_PLAY).integers(0, 2**62))
        return gen_play(self.env, self.world_model(), self.play.n_steps, seed, self.exploration_obj())

    def action_prior(self, dataset: PlayDataset | None = None) -> PriorModel:
        if self.prior.prior_path:
            return PriorModel.load(self.prior.prior_path)
        p = self.prior
        return fit_prior(dataset if dataset is not None else self.play_dataset(),
                         k=p.k, h_edge=p.h_edge, sigma_prior=p.sigma_prior, tau_prior=p.tau_prior)

    def goal_pose(self) -> Pose2:
        g = self.reward.goal
        return Pose2.make(float(g[0]), float(g[1]), float(g[2]))

    def goal_state(self) -> PushTState:
        g = self.goal_pose()
        # the pusher is not part of any object embedding; park it away from the T
        return PushTState(Vec2(0.1, 0.1), g)


def _build(cls, d, where: str):
    if isinstance(d, cls):
        return d
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {', '.join(unknown)}")
    try:
        return cls(**d)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from None


def make_reward(cfg: ExperimentConfig, s_start=None, s_goal=None, rank_model: RankRewardModel | None = None):
    """The configured reward for one planning problem."""
    r = cfg.reward
    if r.kind == "geometric":
        return GeometricReward(GeometricGoal(cfg.goal_pose(), r.w_p, r.w_theta, r.w_a))
    goal = s_goal if s_goal is not None else cfg.goal_state()
    if r.kind == "embed":
        return EmbeddingReward(goal, r.mask, r.alpha, r.w_a)
    if rank_model is None:
        if not r.model_path:
            raise ConfigError("reward.model_path: a rank reward needs a trained model")
        rank_model = RankRewardModel.load(r.model_path)
    return RankReward(rank_model, s_start if s_start is not None else goal, goal, r.w_a)


__all__ = ["ConfigError", "ExperimentConfig", "PlayConfig", "PriorConfig", "RewardConfig", "make_reward",
           "EmbedParams"]

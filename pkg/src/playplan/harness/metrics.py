"""Success and overlap metrics used by the benchmarks."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..core import ChainState, Pose2, PushTState, angdist

THRESHOLDS = (0.025, 0.05, 0.075, 0.1)
YAW_TOL = 0.3


@dataclass(frozen=True)
class SuccessCriterion:
    thresholds: tuple = THRESHOLDS
    yaw_tol: float = YAW_TOL

    def __post_init__(self):
        t = tuple(float(x) for x in self.thresholds)
        if not t or any(x <= 0 for x in t) or any(b <= a for a, b in zip(t, t[1:])):
            raise ValueError("thresholds must be positive and strictly ascending")
        if self.yaw_tol <= 0:
            raise ValueError("yaw_tol must be positive")
        object.__setattr__(self, "thresholds", t)


def pose_errors(states, goal: Pose2) -> np.ndarray:
    """``(n, 2)`` translation and yaw errors of the T along a trajectory."""
    out = np.empty((len(states), 2))
    for i, s in enumerate(states):
        if not isinstance(s, PushTState):
            raise TypeError("success_check needs push-T states")
        t = s.tee
        out[i] = math.hypot(t.x - goal.x, t.y - goal.y), angdist(t.theta, goal.theta)
    return out


def success_check(trajectory, goal: Pose2, criterion: SuccessCriterion | None = None) -> list[bool]:
    """For each threshold: does some state have translation error below it and yaw error below the tolerance?"""
    c = criterion or SuccessCriterion()
    states = getattr(trajectory, "states", trajectory)
    err = pose_errors(states, goal)
    ok_yaw = err[:, 1] < c.yaw_tol
    return [bool(np.any(ok_yaw & (err[:, 0] < th))) for th in c.thresholds]


# --------------------------------------------------------------------------- chain overlap


@dataclass(frozen=True)
class ChainMetrics:
    iou: float
    coverage: float
    resolution: int = 128
    radius: float = 0.012


def rasterize_discs(centres, radius: float, res: int = 128) -> np.ndarray:
    """Boolean ``res x res`` raster (row y, column x) of a union of discs, sampled at pixel centres."""
    c = np.asarray(centres, dtype=float).reshape(-1, 2)
    xs = (np.arange(res) + 0.5) / res
    out = np.zeros((res, res), dtype=bool)
    r2 = radius * radius
    span = int(math.ceil(radius * res)) + 1
    for cx, cy in c:
        i0, j0 = int(cx * res), int(cy * res)
        ii = np.arange(max(0, i0 - span), min(res, i0 + span + 1))
        jj = np.arange(max(0, j0 - span), min(res, j0 + span + 1))
        if len(ii) == 0 or len(jj) == 0:
            continue
        d2 = (xs[ii][None, :] - cx) ** 2 + (xs[jj][:, None] - cy) ** 2
        out[np.ix_(jj, ii)] |= d2 <= r2
    return out


def raster_overlap(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """IoU and coverage (intersection over ``a``) of two boolean rasters."""
    inter = np.count_nonzero(a & b)
    union = np.count_nonzero(a | b)
    na = np.count_nonzero(a)
    iou = inter / union if union else 1.0
    cov = inter / na if na else (1.0 if not np.any(b) else 0.0)
    return iou, cov


def chain_metrics(terminal: ChainState, goal: ChainState, resolution: int = 128,
                  radius: float = 0.012) -> ChainMetrics:
    a = rasterize_discs(terminal.links, radius, resolution)
    b = rasterize_discs(goal.links, radius, resolution)
    iou, cov = raster_overlap(a, b)
    return ChainMetrics(iou, cov, resolution, radius)

"""Benchmark metrics over SLAM results.

Every metric is kept as a (sum, count) pair per episode so that benchmark
rows pool all errors instead of averaging per-episode values.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from crowdslam.geometry import se2_between
from crowdslam.simulator import EpisodeRecord
from crowdslam.slam.pipeline import SlamResult

# (attribute, CSV header, kind) in table order; "rms" pools squared errors, "mean" absolute ones
METRIC_COLUMNS = [
    ("robot_rmse", "Robot RMSE", "rms"),
    ("lm_rmse", "LM RMSE", "rms"),
    ("ate", "ATE", "mean"),
    ("rpe_mean", "RPE", "mean"),
    ("sde", "SDE", "mean"),
    ("pred_rmse", "Pred. RMSE", "rms"),
]


class MetricsError(ValueError):
    pass


# ---------------------------------------------------------------------------
# error terms
# ---------------------------------------------------------------------------


def _position_errors(est, gt) -> np.ndarray:
    est = np.asarray(est, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if est.shape[:-1] != gt.shape[:-1]:
        raise MetricsError(f"estimate shape {est.shape} does not match ground truth {gt.shape}")
    e = np.linalg.norm(est[..., :2] - gt[..., :2], axis=-1)
    return e[np.isfinite(e)]


def robot_errors(est, gt) -> np.ndarray:
    e = _position_errors(est, gt)
    if e.size == 0:
        raise MetricsError("no overlapping robot estimates")
    return e


def landmark_errors(est, gt) -> np.ndarray:
    """Errors over all (step, ped) entries with a finite estimate."""
    e = _position_errors(est, gt)
    if e.size == 0:
        raise MetricsError("no landmark estimates")
    return e


def rpe_errors(est, gt) -> np.ndarray:
    est = np.asarray(est, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if est.shape != gt.shape or est.ndim != 2 or est.shape[1] != 3:
        raise MetricsError("RPE needs matching (L, 3) pose arrays")
    if est.shape[0] < 2:
        raise MetricsError("RPE needs at least 2 steps")
    rel_est = se2_between(est[:-1], est[1:])
    rel_gt = se2_between(gt[:-1], gt[1:])
    d = se2_between(rel_est, rel_gt)
    return np.hypot(d[:, 0], d[:, 1])


def sde_errors(robot_est, lm_est, robot_gt, lm_gt) -> np.ndarray:
    """Per-step ``|d_min(est) - d_min(gt)|`` for the minimum robot-pedestrian distance.

    Both minima run over the pedestrians that have an estimate at that step;
    steps without any estimate are skipped.
    """
    lm_est = np.asarray(lm_est, dtype=float)
    lm_gt = np.asarray(lm_gt, dtype=float)
    if lm_est.shape[1] == 0:
        raise MetricsError("SDE needs at least one pedestrian")
    d_est = np.linalg.norm(lm_est - np.asarray(robot_est)[:, None, :2], axis=-1)
    d_gt = np.linalg.norm(lm_gt - np.asarray(robot_gt)[:, None, :2], axis=-1)
    seen = np.isfinite(d_est)
    rows = np.flatnonzero(seen.any(axis=1))
    if rows.size == 0:
        raise MetricsError("SDE needs at least one pedestrian estimate")
    big = np.where(seen, 0.0, np.inf)
    est_min = np.min(np.where(seen, d_est, np.inf), axis=1)[rows]
    gt_min = np.min(d_gt + big, axis=1)[rows]
    return np.abs(est_min - gt_min)


def prediction_positions(res: SlamResult) -> np.ndarray:
    """Predicted positions, with a zero-velocity hold where the prior gives none."""
    pos = res.pred_positions.copy()
    if not res.predictions_available:
        pos = np.broadcast_to(res.pred_origin[:, None, :], pos.shape).copy()
    return pos


def prediction_errors(res: SlamResult, ped_positions: np.ndarray) -> np.ndarray:
    """Position errors at horizon offsets 1..T for emissions whose full horizon has ground truth."""
    T = res.horizon
    L = ped_positions.shape[0]
    keep = res.pred_step + T < L
    if not np.any(keep):
        return np.zeros(0)
    row = {int(p): k for k, p in enumerate(res.ped_ids)}
    cols = np.array([row[int(p)] for p in res.pred_ped[keep]], dtype=np.int64)
    steps = res.pred_step[keep][:, None] + np.arange(1, T + 1)[None, :]
    gt = ped_positions[steps, cols[:, None]]
    return np.linalg.norm(prediction_positions(res)[keep] - gt, axis=-1).ravel()


def pred_rmse(res: SlamResult, ped_positions: np.ndarray) -> float:
    e = prediction_errors(res, ped_positions)
    if e.size == 0:
        raise MetricsError("no predictions to evaluate")
    return float(np.sqrt(np.mean(e * e)))


def robot_rmse(est, gt) -> float:
    e = robot_errors(est, gt)
    return float(np.sqrt(np.mean(e * e)))


def lm_rmse(est, gt) -> float:
    e = landmark_errors(est, gt)
    return float(np.sqrt(np.mean(e * e)))


def ate(est, gt) -> float:
    return float(np.mean(robot_errors(est, gt)))


def rpe(est, gt) -> float:
    return float(np.mean(rpe_errors(est, gt)))


def sde(robot_est, lm_est, robot_gt, lm_gt) -> float:
    return float(np.mean(sde_errors(robot_est, lm_est, robot_gt, lm_gt)))


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class EpisodeMetrics:
    """Sums and counts for one episode; ``value`` turns them into the metric."""

    episode_seed: int
    sums: dict[str, float]
    counts: dict[str, int]

    def value(self, name: str) -> float | None:
        kind = dict((a, k) for a, _, k in METRIC_COLUMNS)[name]
        n = self.counts.get(name, 0)
        if n == 0:
            return None
        s = self.sums[name] / n
        return math.sqrt(s) if kind == "rms" else s


@dataclass
class MetricsReport:
    method: str
    horizon: int
    robot_rmse: float
    lm_rmse: float
    ate: float
    rpe_mean: float
    sde: float
    pred_rmse: float | None
    episodes: list[EpisodeMetrics] = field(default_factory=list)

    @property
    def n_episodes(self) -> int:
        return len(self.episodes)

    def row(self) -> dict:
        out = {"Method": self.method}
        for attr, header, _ in METRIC_COLUMNS:
            v = getattr(self, attr)
            out[header] = "" if v is None else f"{v:.6f}"
        out["Episodes"] = self.n_episodes
        return out


def evaluate_episode(res: SlamResult, record: EpisodeRecord) -> EpisodeMetrics:
    if res.robot.shape[0] != record.n_steps:
        raise MetricsError(f"result has {res.robot.shape[0]} steps, episode has {record.n_steps}")
    if not np.array_equal(res.ped_ids, record.ped_ids):
        raise MetricsError("result and episode pedestrian ids differ")
    gt_lm = record.ped_positions
    terms = {
        "robot_rmse": robot_errors(res.robot, record.robot_poses) ** 2,
        "ate": robot_errors(res.robot, record.robot_poses),
        "rpe_mean": rpe_errors(res.robot, record.robot_poses),
    }
    try:
        terms["lm_rmse"] = landmark_errors(res.landmarks, gt_lm) ** 2
        terms["sde"] = sde_errors(res.robot, res.landmarks, record.robot_poses, gt_lm)
    except MetricsError:
        terms["lm_rmse"] = terms["sde"] = np.zeros(0)
    terms["pred_rmse"] = prediction_errors(res, gt_lm) ** 2 if res.pred_step.size else np.zeros(0)
    sums = {k: float(np.sum(v)) for k, v in terms.items()}
    counts = {k: int(v.size) for k, v in terms.items()}
    return EpisodeMetrics(int(res.episode_seed), sums, counts)


def aggregate(method: str, horizon: int, episodes: list[EpisodeMetrics]) -> MetricsReport:
    """Pool per-episode sums and counts into one benchmark row."""
    if not episodes:
        raise MetricsError("nothing to aggregate")
    sums: dict[str, float] = {}
    counts: dict[str, int] = {}
    for e in episodes:
        for k in e.sums:
            sums[k] = sums.get(k, 0.0) + e.sums[k]
            counts[k] = counts.get(k, 0) + e.counts[k]
    pooled = EpisodeMetrics(-1, sums, counts)
    vals = {a: pooled.value(a) for a, _, _ in METRIC_COLUMNS}
    return MetricsReport(method, horizon, episodes=list(episodes), **vals)


def evaluate(method: str, pairs) -> MetricsReport:
    """``pairs`` yields ``(SlamResult, EpisodeRecord)``."""
    eps, horizon = [], 0
    for res, rec in pairs:
        eps.append(evaluate_episode(res, rec))
        horizon = res.horizon
    return aggregate(method, horizon, eps)


def write_table(reports: list[MetricsReport], path) -> Path:
    path = Path(path)
    header = ["Method"] + [h for _, h, _ in METRIC_COLUMNS] + ["Episodes"]
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=header)
        w.writeheader()
        for r in reports:
            w.writerow(r.row())
    return path


def write_episode_table(reports: list[MetricsReport], path) -> Path:
    path = Path(path)
    header = ["Method", "Episode seed"] + [h for _, h, _ in METRIC_COLUMNS]
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in reports:
            for e in r.episodes:
                vals = [e.value(a) for a, _, _ in METRIC_COLUMNS]
                w.writerow([r.method, e.episode_seed] + ["" if v is None else f"{v:.6f}" for v in vals])
    return path


# ---------------------------------------------------------------------------
# uncertainty analysis
# ---------------------------------------------------------------------------


def horizon_covariance_traces(res: SlamResult, radius: float, step: int | None = None):
    """Position-covariance trace at horizon ``step`` (default: last) and the local crowd size.

    The crowd size of a prediction counts the pedestrians (itself included)
    whose MAP estimate at the emission step lies within ``radius``.
    """
    if res.pred_cov is None:
        raise MetricsError(f"result of method {res.method!r} has no covariances")
    h = res.horizon - 1 if step is None else step - 1
    traces = np.trace(res.pred_cov[:, h], axis1=-2, axis2=-1)
    lm = res.landmarks[res.pred_step]  # (K, P, 2)
    d = np.linalg.norm(lm - res.pred_origin[:, None, :], axis=-1)
    crowd = np.sum(np.isfinite(d) & (d <= radius), axis=1)
    return traces, crowd

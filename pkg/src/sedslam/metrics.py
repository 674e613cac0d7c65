"""Evaluation measures: angular pose errors, pose-error AUC, and ATE RMSE
after a global 7-DOF (or 6-DOF) alignment."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AssociationError
from .geom import RelativePose, rotation_angle
from .sim3 import Trajectory

ASSOCIATION_WINDOW = 0.020  # seconds


@dataclass(frozen=True)
class PoseError:
    """Geodesic rotation angle and translation-direction angle, degrees."""

    rot_deg: float
    trans_deg: float

    @property
    def max_deg(self) -> float:
        return max(self.rot_deg, self.trans_deg)


def pose_error(est: RelativePose, gt: RelativePose) -> PoseError:
    rot = np.degrees(rotation_angle(est.rotation.T @ gt.rotation))
    cos_t = np.clip(np.dot(est.translation_dir, gt.translation_dir), -1.0, 1.0)
    return PoseError(float(rot), float(np.degrees(np.arccos(cos_t))))


def pose_auc(errors, threshold: float) -> float:
    """Area under the accuracy-vs-threshold curve on [0, threshold], percent.

    Exact integral of the empirical CDF of the errors, normalized by the
    threshold: a single error at threshold/2 scores 50%.
    """
    errors = np.asarray(errors, dtype=float).reshape(-1)
    if errors.size == 0:
        raise ValueError("error list must be non-empty")
    if threshold <= 0.0:
        raise ValueError("threshold must be positive")
    return float(np.mean(np.clip(threshold - errors, 0.0, threshold)) / threshold * 100.0)


def umeyama_alignment(src, dst, with_scale: bool = True):
    """Closed-form similarity (s, R, t) minimizing ||dst - (s R src + t)||^2."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    xs = src - mu_s
    xd = dst - mu_d
    cov = xd.T @ xs / len(src)
    u, d, vt = np.linalg.svd(cov)
    s_fix = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0.0:
        s_fix[2, 2] = -1.0
    rot = u @ s_fix @ vt
    if with_scale:
        var_s = np.mean(np.sum(xs * xs, axis=1))
        scale = float(np.trace(np.diag(d) @ s_fix) / var_s) if var_s > 0.0 else 1.0
    else:
        scale = 1.0
    t = mu_d - scale * (rot @ mu_s)
    return scale, rot, t


def associate_timestamps(ts_a, ts_b, max_dt: float = ASSOCIATION_WINDOW):
    """Greedy mutual nearest-neighbor association within a time window."""
    ts_a = np.asarray(ts_a, dtype=float)
    ts_b = np.asarray(ts_b, dtype=float)
    pairs = [(abs(a - b), i, j) for i, a in enumerate(ts_a) for j, b in enumerate(ts_b)
             if abs(a - b) <= max_dt]
    pairs.sort()
    used_a, used_b, matches = set(), set(), []
    for _, i, j in pairs:
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        matches.append((i, j))
    matches.sort()
    return matches


def ate_rmse(est: Trajectory, gt: Trajectory, mode: str = "sim3",
             max_dt: float = ASSOCIATION_WINDOW) -> float:
    """RMSE of position residuals after global trajectory alignment.

    ``mode`` selects the alignment group: "sim3" estimates scale, rotation
    and translation (7 DOF), "se3" fixes scale to 1.
    """
    if mode not in ("sim3", "se3"):
        raise ValueError(f"unknown alignment mode {mode!r}")
    matches = associate_timestamps(est.timestamps(), gt.timestamps(), max_dt)
    if len(matches) < 3:
        raise AssociationError(
            f"only {len(matches)} associated pose pairs (need at least 3)")
    p_est = est.positions()[[i for i, _ in matches]]
    p_gt = gt.positions()[[j for _, j in matches]]
    scale, rot, t = umeyama_alignment(p_est, p_gt, with_scale=(mode == "sim3"))
    residual = p_gt - (scale * (p_est @ rot.T) + t)
    return float(np.sqrt(np.mean(np.sum(residual * residual, axis=1))))

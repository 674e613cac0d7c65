"""Joining disjoint trajectories through a relative Sim(3).

Given a cross-trajectory two-view pose, the translation magnitude and the
inter-session scale are recovered by brute-force depth-ratio voting: for
each side, every candidate scale ``s = d_k / d'_k`` (map depth over
unit-baseline triangulated depth) is scored by the number of pairs with
``1/lam < d_k / (s d'_k) < lam``, and the maximizer wins. The two per-side
magnitudes combine with the solved rotation into a similarity transform
that maps one trajectory into the other's reference frame.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import InsufficientInliersError, TimestampCollisionError, TooFewDepthsError
from .geom import Intrinsics, RelativePose, Se3Pose, Sim3Transform, triangulate_batch
from .twoview import AnchorMatchSet, LmConfig, SedSolveReport, solve_two_view

# Default inlier band of the depth-ratio vote.
RATIO_BOUND = 1.05
# Minimum per-side inlier fraction before a candidate pair is rejected.
INLIER_THRESHOLD = 0.3
# Minimum number of valid triangulated depths across both sides.
MIN_VALID_DEPTHS = 10


@dataclass(frozen=True, eq=False)
class Keyframe:
    timestamp: float
    pose: Se3Pose
    depths: np.ndarray
    anchors: np.ndarray | None = None

    def __post_init__(self):
        d = np.array(self.depths, dtype=float).reshape(-1)
        if np.any(d <= 0.0):
            raise ValueError("keyframe depths must be positive")
        d.flags.writeable = False
        object.__setattr__(self, "depths", d)
        if self.anchors is not None:
            a = np.array(self.anchors, dtype=float).reshape(-1, 2)
            if len(a) != len(d):
                raise ValueError("one depth per anchor required")
            a.flags.writeable = False
            object.__setattr__(self, "anchors", a)


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Timestamp-ordered keyframes with world-from-camera poses."""

    keyframes: tuple[Keyframe, ...]
    intrinsics: Intrinsics | None = None
    image_size: tuple[float, float] | None = None

    def __post_init__(self):
        object.__setattr__(self, "keyframes", tuple(self.keyframes))
        ts = self.timestamps()
        if len(ts) > 1 and np.any(np.diff(ts) <= 0.0):
            raise ValueError("keyframe timestamps must be strictly increasing")

    def __len__(self):
        return len(self.keyframes)

    def timestamps(self) -> np.ndarray:
        return np.array([k.timestamp for k in self.keyframes])

    def positions(self) -> np.ndarray:
        return np.array([k.pose.translation for k in self.keyframes])


@dataclass
class JoinCandidate:
    """A retrieved cross-trajectory frame pair with its match set.

    ``anchor_ids0``/``anchor_ids1`` index the per-keyframe depth arrays,
    aligning each anchor of the match set with its map depth.
    """

    frame_a: int
    frame_b: int
    matches: AnchorMatchSet
    anchor_ids0: np.ndarray
    anchor_ids1: np.ndarray
    pose: RelativePose | None = None


@dataclass(frozen=True)
class ScaleEstimate:
    scale: float
    inlier_count: int
    inlier_fraction: float

    def __post_init__(self):
        if self.scale <= 0.0:
            raise ValueError("scale must be positive")


@dataclass(frozen=True)
class TriangulatedDepths:
    depths0: np.ndarray
    valid0: np.ndarray
    depths1: np.ndarray
    valid1: np.ndarray
    n_dropped: int


def triangulated_depths(candidate: JoinCandidate) -> TriangulatedDepths:
    """Unit-baseline depths of every anchor under the candidate's pose.

    Frame-b anchors are triangulated with the inverse pose so each depth is
    expressed in its own camera. Non-positive and degenerate triangulations
    are dropped (marked invalid) and counted.
    """
    if candidate.pose is None:
        raise ValueError("candidate has no solved pose")
    mset = candidate.matches
    d0, d0_other, ok0 = triangulate_batch(candidate.pose, mset.anchors0, mset.matches0,
                                          mset.intrinsics0, mset.intrinsics1)
    d1, d1_other, ok1 = triangulate_batch(candidate.pose.inverse(), mset.anchors1,
                                          mset.matches1, mset.intrinsics1, mset.intrinsics0)
    valid0 = ok0 & (d0 > 0.0) & (d0_other > 0.0)
    valid1 = ok1 & (d1 > 0.0) & (d1_other > 0.0)
    n_valid = int(np.sum(valid0) + np.sum(valid1))
    n_dropped = len(d0) + len(d1) - n_valid
    if n_valid < MIN_VALID_DEPTHS:
        raise TooFewDepthsError(
            f"only {n_valid} valid triangulated depths (need {MIN_VALID_DEPTHS})")
    return TriangulatedDepths(d0, valid0, d1, valid1, n_dropped)


def estimate_scale(map_depths, tri_depths, ratio_bound: float = RATIO_BOUND) -> ScaleEstimate:
    """Brute-force depth-ratio vote recovering the translation magnitude.

    Every candidate ``s = d_k / d'_k`` is scored by how many pairs fall in
    the ratio band; the maximizer wins and ties break to the smaller s.
    """
    d = np.asarray(map_depths, dtype=float).reshape(-1)
    dp = np.asarray(tri_depths, dtype=float).reshape(-1)
    if d.size == 0 or d.size != dp.size:
        raise ValueError("paired non-empty depth lists required")
    if ratio_bound <= 1.0:
        raise ValueError("ratio bound must exceed 1")
    candidates = d / dp
    ratios = d[None, :] / (candidates[:, None] * dp[None, :])
    counts = np.sum((ratios > 1.0 / ratio_bound) & (ratios < ratio_bound), axis=1)
    best_count = int(counts.max())
    best = float(np.min(candidates[counts == best_count]))
    return ScaleEstimate(best, best_count, best_count / d.size)


def build_sim3(pose: RelativePose, scale_a: ScaleEstimate, scale_b: ScaleEstimate,
               inlier_threshold: float = INLIER_THRESHOLD) -> Sim3Transform:
    """Similarity mapping frame-b camera coordinates into frame a's.

    ``pose`` is the a-to-b relative pose of the solved match set; ``scale_a``
    and ``scale_b`` are the baseline magnitudes in each trajectory's units.
    The output has scale s_a/s_b and translation -s_a Rᵀ t, the variant
    validated by the synthetic round-trip oracle (the translation must be
    expressed in trajectory-a units).
    """
    if scale_a.inlier_fraction < inlier_threshold or scale_b.inlier_fraction < inlier_threshold:
        raise InsufficientInliersError(
            "scale voting inlier fractions "
            f"({scale_a.inlier_fraction:.3f}, {scale_b.inlier_fraction:.3f}) "
            f"below {inlier_threshold}; retry with another candidate pair")
    rot_ba = pose.rotation.T
    t_ba = -scale_a.scale * (rot_ba @ pose.translation_dir)
    return Sim3Transform(scale_a.scale / scale_b.scale, rot_ba, t_ba)


@dataclass
class JoinEstimate:
    world_sim3: Sim3Transform
    camera_sim3: Sim3Transform
    scale_a: ScaleEstimate
    scale_b: ScaleEstimate
    report: SedSolveReport
    candidate: JoinCandidate


def estimate_join(traj_a: Trajectory, traj_b: Trajectory, candidate: JoinCandidate,
                  ratio_bound: float = RATIO_BOUND,
                  inlier_threshold: float = INLIER_THRESHOLD,
                  config: LmConfig | None = None) -> JoinEstimate:
    """Solve a candidate pair and lift the result to a world-level Sim(3).

    Runs the two-view solver, triangulates, votes the two scales, builds the
    camera-level transform and conjugates it with the keyframe poses:
    ``S_world = G_a . S_cam . G_b^-1`` maps trajectory b's world frame into
    trajectory a's.
    """
    report = solve_two_view(candidate.matches, config)
    candidate.pose = report.pose
    tri = triangulated_depths(candidate)

    kf_a = traj_a.keyframes[candidate.frame_a]
    kf_b = traj_b.keyframes[candidate.frame_b]
    vo_a = kf_a.depths[candidate.anchor_ids0][tri.valid0]
    vo_b = kf_b.depths[candidate.anchor_ids1][tri.valid1]
    if vo_a.size == 0 or vo_b.size == 0:
        raise TooFewDepthsError("no valid depths on one side of the candidate pair")
    scale_a = estimate_scale(vo_a, tri.depths0[tri.valid0], ratio_bound)
    scale_b = estimate_scale(vo_b, tri.depths1[tri.valid1], ratio_bound)

    cam = build_sim3(report.pose, scale_a, scale_b, inlier_threshold)
    world = (Sim3Transform.from_se3(kf_a.pose)
             .compose(cam)
             .compose(Sim3Transform.from_se3(kf_b.pose).inverse()))
    return JoinEstimate(world, cam, scale_a, scale_b, report, candidate)


def merge_trajectories(traj_a: Trajectory, traj_b: Trajectory,
                       sim3: Sim3Transform) -> Trajectory:
    """Map trajectory b through a world-level Sim(3) and interleave by time.

    Depths of b scale by ``sim3.scale`` since camera coordinates rescale
    alongside the world.
    """
    ts_a = set(np.round(traj_a.timestamps(), 9).tolist())
    ts_b = set(np.round(traj_b.timestamps(), 9).tolist())
    common = ts_a & ts_b
    if common:
        raise TimestampCollisionError(
            f"{len(common)} timestamps appear in both trajectories")
    mapped = [replace(k, pose=sim3.transform_pose(k.pose), depths=sim3.scale * k.depths)
              for k in traj_b.keyframes]
    merged = sorted(list(traj_a.keyframes) + mapped, key=lambda k: k.timestamp)
    return Trajectory(tuple(merged), traj_a.intrinsics, traj_a.image_size)

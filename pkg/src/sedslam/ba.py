"""Reprojection-error bundle adjustment over global poses and anchor depths.

Minimizes

    sum_{(i,j) in F} sum_{k in K(i)} w_kj * || proj[G_j^-1 G_i unproj(a_k, d_k)] - m_kj ||^2

with Levenberg-Marquardt over local se(3) pose updates and inverse depths.
The gauge is fixed by freezing the first pose and renormalizing the mean
log-depth (an exact cost-invariant transformation) after every accepted
step; depths are eliminated first through a Schur complement since they are
scalar blocks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCameraError, IndefiniteSystemError
from .geom import Intrinsics, Se3Pose, backproject, project, skew, so3_exp


@dataclass
class Edge:
    """Observation of frame i's anchors in frame j."""

    i: int
    j: int
    matches: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        if self.i == self.j:
            raise ValueError(f"self edge ({self.i}, {self.j}) is not allowed")
        self.matches = np.array(self.matches, dtype=float).reshape(-1, 2)
        self.weights = np.array(self.weights, dtype=float).reshape(-1)
        if len(self.weights) != len(self.matches):
            raise ValueError("one weight per match required")
        if np.any(self.weights < 0.0):
            raise ValueError("weights must be non-negative")


@dataclass
class FactorGraph:
    """Frames with poses, per-frame anchors with depths, and match edges.

    Poses are world-from-camera. The graph is mutable and owned by one solve
    at a time; :func:`ba_solve` updates poses and depths in place.
    """

    poses: list[Se3Pose]
    intrinsics: list[Intrinsics]
    anchors: list[np.ndarray]
    depths: list[np.ndarray]
    edges: list[Edge]

    def __post_init__(self):
        n = len(self.poses)
        if not (len(self.intrinsics) == len(self.anchors) == len(self.depths) == n):
            raise ValueError("per-frame lists must have equal length")
        self.anchors = [np.array(a, dtype=float).reshape(-1, 2) for a in self.anchors]
        self.depths = [np.array(d, dtype=float).reshape(-1) for d in self.depths]
        for a, d in zip(self.anchors, self.depths):
            if len(a) != len(d):
                raise ValueError("one depth per anchor required")
            if np.any(d <= 0.0):
                raise ValueError("depths must be strictly positive")
        for e in self.edges:
            if not (0 <= e.i < n and 0 <= e.j < n):
                raise ValueError(f"edge ({e.i}, {e.j}) references a missing frame")
            if len(e.matches) != len(self.anchors[e.i]):
                raise ValueError("edge must carry one match per owner-frame anchor")

    @property
    def n_frames(self) -> int:
        return len(self.poses)

    @property
    def n_anchors(self) -> int:
        return int(sum(len(a) for a in self.anchors))


@dataclass
class BaConfig:
    max_iters: int = 50
    lambda_init: float = 1e-4
    lambda_min: float = 1e-10
    lambda_max: float = 1e6
    step_tol: float = 1e-10
    cost_tol: float = 1e-12


@dataclass
class BaReport:
    iterations: int
    initial_rmse: float
    final_rmse: float
    converged: bool
    cost_trace: tuple[float, ...] = field(default=(), repr=False)
    n_behind: int = 0


def reprojection_residual(graph: FactorGraph, edge_index: int, k: int) -> np.ndarray:
    """Pixel residual of anchor k of one edge: proj[G_j^-1 G_i unproj(a_k, d_k)] - m_kj."""
    edge = graph.edges[edge_index]
    p = backproject(graph.anchors[edge.i][k], graph.depths[edge.i][k], graph.intrinsics[edge.i])
    q = graph.poses[edge.j].inverse().apply(graph.poses[edge.i].apply(p))
    if q[2] <= 0.0:
        raise BehindCameraError(f"anchor {k} of edge {edge_index} reprojects behind camera {edge.j}")
    return project(q, graph.intrinsics[edge.j]) - edge.matches[k]


def _edge_points(graph, edge):
    """Camera-j coordinates of edge i's anchors plus intermediate terms."""
    ki = graph.intrinsics[edge.i]
    a = graph.anchors[edge.i]
    rays = np.concatenate([a, np.ones((len(a), 1))], axis=1) @ ki.inv_matrix().T
    p = rays * graph.depths[edge.i][:, None]
    gi, gj = graph.poses[edge.i], graph.poses[edge.j]
    y = p @ gi.rotation.T + gi.translation            # world points
    q = (y - gj.translation) @ gj.rotation            # camera-j points
    return rays, y, q


def _residual_pass(graph):
    """Stacked weighted residuals; behind-camera terms get weight zero."""
    res, wts, behind = [], [], 0
    for edge in graph.edges:
        _, _, q = _edge_points(graph, edge)
        kj = graph.intrinsics[edge.j]
        ok = q[:, 2] > 0.0
        behind += int(np.sum(~ok))
        z = np.where(ok, q[:, 2], 1.0)
        proj = np.stack([kj.fx * q[:, 0] / z + kj.cx, kj.fy * q[:, 1] / z + kj.cy], axis=1)
        r = proj - edge.matches
        w = edge.weights * ok
        res.append(np.sqrt(w)[:, None] * r)
        wts.append(w)
    return np.concatenate(res), np.concatenate(wts), behind


def _cost_and_rmse(graph):
    res, wts, behind = _residual_pass(graph)
    cost = float(np.sum(res * res))
    wsum = float(np.sum(wts))
    rmse = float(np.sqrt(cost / (2.0 * wsum))) if wsum > 0.0 else 0.0
    return cost, rmse, behind


def ba_cost(graph: FactorGraph) -> float:
    """Total weighted squared reprojection error of the graph."""
    return _cost_and_rmse(graph)[0]


def _solve_step(graph, lam, anchor_offsets):
    """One damped normal-equations solve with the depths Schur-eliminated.

    Returns (pose_steps (F-1, 6), depth_steps (n_d,)); pose parameters are
    (omega, v) of a left-multiplied update, frame 0 is frozen.
    """
    n_frames = graph.n_frames
    n_pose = 6 * (n_frames - 1)
    n_depth = graph.n_anchors
    h_pp = np.zeros((n_pose, n_pose))
    h_pd = np.zeros((n_pose, n_depth))
    h_dd = np.zeros(n_depth)
    g_p = np.zeros(n_pose)
    g_d = np.zeros(n_depth)

    for edge in graph.edges:
        rays, y, q = _edge_points(graph, edge)
        kj = graph.intrinsics[edge.j]
        gi, gj = graph.poses[edge.i], graph.poses[edge.j]
        ok = q[:, 2] > 0.0
        z = np.where(ok, q[:, 2], 1.0)
        proj = np.stack([kj.fx * q[:, 0] / z + kj.cx, kj.fy * q[:, 1] / z + kj.cy], axis=1)
        r = proj - edge.matches
        w = edge.weights * ok
        sw = np.sqrt(w)

        n = len(rays)
        inv_z = 1.0 / z
        dpi = np.zeros((n, 2, 3))
        dpi[:, 0, 0] = kj.fx * inv_z
        dpi[:, 0, 2] = -kj.fx * q[:, 0] * inv_z * inv_z
        dpi[:, 1, 1] = kj.fy * inv_z
        dpi[:, 1, 2] = -kj.fy * q[:, 1] * inv_z * inv_z

        rjt = gj.rotation.T
        # d q / d xi_i = [-Rjᵀ [y]x | Rjᵀ], d q / d xi_j is its negative.
        y_skew = np.zeros((n, 3, 3))
        y_skew[:, 0, 1] = -y[:, 2]
        y_skew[:, 0, 2] = y[:, 1]
        y_skew[:, 1, 0] = y[:, 2]
        y_skew[:, 1, 2] = -y[:, 0]
        y_skew[:, 2, 0] = -y[:, 1]
        y_skew[:, 2, 1] = y[:, 0]
        dq_xi = np.empty((n, 3, 6))
        dq_xi[:, :, :3] = -np.einsum("ab,nbc->nac", rjt, y_skew)
        dq_xi[:, :, 3:] = np.broadcast_to(rjt, (n, 3, 3))

        # d q / d rho for inverse depth rho = 1/d: -Rjᵀ Ri u d^2.
        d2 = graph.depths[edge.i] ** 2
        dq_rho = -(rays @ (rjt @ gi.rotation).T) * d2[:, None]

        j_i = np.einsum("nij,njp->nip", dpi, dq_xi) * sw[:, None, None]
        j_d = np.einsum("nij,nj->ni", dpi, dq_rho) * sw[:, None]
        rw = r * sw[:, None]

        blocks = []
        if edge.i > 0:
            blocks.append((edge.i, j_i))
        if edge.j > 0:
            blocks.append((edge.j, -j_i))
        d_idx = anchor_offsets[edge.i] + np.arange(n)

        for fa, ja in blocks:
            sa = slice(6 * (fa - 1), 6 * fa)
            ja_flat = ja.reshape(-1, 6)
            g_p[sa] += ja_flat.T @ rw.reshape(-1)
            for fb, jb in blocks:
                sb = slice(6 * (fb - 1), 6 * fb)
                h_pp[sa, sb] += ja_flat.T @ jb.reshape(-1, 6)
            h_pd_block = np.einsum("nip,ni->np", ja, j_d)
            h_pd[sa, d_idx] += h_pd_block.T
        h_dd[d_idx] += np.sum(j_d * j_d, axis=1)
        g_d[d_idx] += np.sum(j_d * rw, axis=1)

    h_dd = h_dd + lam
    b_p = -g_p
    b_d = -g_d
    inv_dd = 1.0 / h_dd
    schur = h_pp + lam * np.eye(n_pose) - (h_pd * inv_dd) @ h_pd.T
    rhs = b_p - h_pd @ (inv_dd * b_d)
    try:
        pose_step = np.linalg.solve(schur, rhs)
    except np.linalg.LinAlgError as exc:
        raise IndefiniteSystemError("damped normal equations failed to factor") from exc
    depth_step = inv_dd * (b_d - h_pd.T @ pose_step)
    return pose_step.reshape(-1, 6), depth_step


def _apply_step(graph, pose_step, depth_step, anchor_offsets):
    new_poses = [graph.poses[0]]
    for f in range(1, graph.n_frames):
        omega, v = pose_step[f - 1, :3], pose_step[f - 1, 3:]
        rot = so3_exp(omega)
        old = graph.poses[f]
        new_poses.append(Se3Pose(rot @ old.rotation, rot @ old.translation + v))
    new_depths = []
    for f in range(graph.n_frames):
        rho = 1.0 / graph.depths[f]
        rho_new = rho + depth_step[anchor_offsets[f]:anchor_offsets[f] + len(rho)]
        if np.any(rho_new <= 0.0):
            return None
        new_depths.append(1.0 / rho_new)
    return new_poses, new_depths


def _renormalize_gauge(poses, depths, target_mean_log_depth):
    """Exact scale-gauge transform restoring the mean log-depth.

    Rescales all depths by c and moves every translation to
    c*t + (1-c)*t_0, which leaves the reprojection cost unchanged and the
    first (frozen) pose fixed.
    """
    all_d = np.concatenate(depths)
    c = float(np.exp(target_mean_log_depth - np.mean(np.log(all_d))))
    if abs(c - 1.0) < 1e-15:
        return poses, depths
    t0 = poses[0].translation
    new_poses = [poses[0]] + [
        Se3Pose(p.rotation, c * p.translation + (1.0 - c) * t0) for p in poses[1:]
    ]
    new_depths = [c * d for d in depths]
    return new_poses, new_depths


def ba_solve(graph: FactorGraph, config: BaConfig | None = None) -> BaReport:
    """Bundle adjustment; mutates the graph's poses and depths in place."""
    if graph.n_frames < 2:
        raise ValueError("bundle adjustment needs at least 2 frames")
    if graph.n_anchors < 6:
        raise ValueError("bundle adjustment needs at least 6 anchors")
    cfg = config or BaConfig()
    anchor_offsets = np.concatenate([[0], np.cumsum([len(a) for a in graph.anchors])])[:-1]
    target_mld = float(np.mean(np.log(np.concatenate(graph.depths))))

    cost, rmse, behind = _cost_and_rmse(graph)
    initial_rmse = rmse
    trace = [cost]
    lam = cfg.lambda_init
    converged = False
    iterations = 0

    for _ in range(cfg.max_iters):
        iterations += 1
        pose_step, depth_step = _solve_step(graph, lam, anchor_offsets)
        step_norm = float(np.sqrt(np.sum(pose_step ** 2) + np.sum(depth_step ** 2)))
        if step_norm < cfg.step_tol:
            converged = True
            break
        updated = _apply_step(graph, pose_step, depth_step, anchor_offsets)
        if updated is None:
            new_cost, new_rmse, new_behind = np.inf, rmse, behind
            new_poses, new_depths = graph.poses, graph.depths
        else:
            new_poses, new_depths = _renormalize_gauge(*updated, target_mld)
            probe = FactorGraph(new_poses, graph.intrinsics, graph.anchors,
                                new_depths, graph.edges)
            new_cost, new_rmse, new_behind = _cost_and_rmse(probe)
        if new_cost < cost:
            decrease = cost - new_cost
            graph.poses = new_poses
            graph.depths = new_depths
            cost, rmse, behind = new_cost, new_rmse, new_behind
            trace.append(cost)
            lam = max(lam * 0.5, cfg.lambda_min)
            if decrease < cfg.cost_tol:
                converged = True
                break
        else:
            lam = lam * 4.0
            if lam > cfg.lambda_max:
                break

    return BaReport(iterations=iterations, initial_rmse=initial_rmse, final_rmse=rmse,
                    converged=converged, cost_trace=tuple(trace), n_behind=behind)


def extrapolate_pose(history) -> Se3Pose:
    """Linear-motion prediction: apply the latest relative motion once more."""
    if len(history) < 2:
        raise ValueError("pose extrapolation needs at least 2 poses")
    prev, last = history[-2], history[-1]
    return last.compose(prev.inverse().compose(last))


def reproject_matches(graph: FactorGraph) -> int:
    """Reset every edge's matches to the reprojection of its anchors.

    After the reset all residuals are exactly zero, making the operation
    idempotent. Returns the number of behind-camera anchors, whose matches
    are left unchanged.
    """
    flagged = 0
    for edge in graph.edges:
        _, _, q = _edge_points(graph, edge)
        kj = graph.intrinsics[edge.j]
        ok = q[:, 2] > 0.0
        flagged += int(np.sum(~ok))
        z = np.where(ok, q[:, 2], 1.0)
        proj = np.stack([kj.fx * q[:, 0] / z + kj.cx, kj.fy * q[:, 1] / z + kj.cy], axis=1)
        edge.matches = np.where(ok[:, None], proj, edge.matches)
    return flagged

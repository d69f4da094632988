"""Depth-aware refinement: back-projection, metric scale recovery, 3-D inlier
selection, per-pair pose optimization, point-cloud accumulation, and the
final sequence-level photometric adjustment of the joint angles.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import InsufficientSupportError, MonotonicityError, NoOverlapError
from .flow import DepthMap, FlowField, Image, sample_bilinear
from .geometry import CameraIntrinsics, RigidMotion
from .kinematics import FramePose, JointTrajectory, KinematicChain
from .segmentation import PartLabeling


@dataclass(frozen=True)
class PointCloud:
    """3-D points with part label, source frame, color, and a tracked pixel.

    ``pixels`` starts as the source pixel of each point and is advanced
    through later flow fields (`advance_pixels`) so that it records the
    point's most recent observed image location; ``pixel_valid`` goes False
    once the trace is lost to occlusion or the image border.
    """

    points: np.ndarray  # (N, 3)
    labels: np.ndarray  # (N,) int
    source_frame: np.ndarray  # (N,) int
    colors: np.ndarray  # (N, 3)
    pixels: np.ndarray  # (N, 2)
    pixel_valid: np.ndarray = None  # type: ignore[assignment]

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if not np.isfinite(pts).all():
            raise ValueError("point coordinates must be finite")
        n = len(pts)
        pv = self.pixel_valid
        pv = np.ones(n, dtype=bool) if pv is None else np.asarray(pv, dtype=bool).reshape(n)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int32).reshape(n))
        object.__setattr__(self, "source_frame", np.asarray(self.source_frame, dtype=np.int32).reshape(n))
        object.__setattr__(self, "colors", np.asarray(self.colors, dtype=float).reshape(n, 3))
        object.__setattr__(self, "pixels", np.asarray(self.pixels, dtype=float).reshape(n, 2))
        object.__setattr__(self, "pixel_valid", pv)

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, idx) -> "PointCloud":
        return PointCloud(
            self.points[idx],
            self.labels[idx],
            self.source_frame[idx],
            self.colors[idx],
            self.pixels[idx],
            self.pixel_valid[idx],
        )

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(
            np.zeros((0, 3)), np.zeros(0, int), np.zeros(0, int), np.zeros((0, 3)), np.zeros((0, 2))
        )

    @classmethod
    def concatenate(cls, clouds) -> "PointCloud":
        clouds = list(clouds)
        if not clouds:
            return cls.empty()
        return cls(
            np.concatenate([c.points for c in clouds]),
            np.concatenate([c.labels for c in clouds]),
            np.concatenate([c.source_frame for c in clouds]),
            np.concatenate([c.colors for c in clouds]),
            np.concatenate([c.pixels for c in clouds]),
            np.concatenate([c.pixel_valid for c in clouds]),
        )


@dataclass(frozen=True)
class InlierSet:
    """Indices of cloud points whose reprojection error was below ``threshold``."""

    indices: np.ndarray
    threshold: float
    n_behind: int = 0

    def __post_init__(self):
        object.__setattr__(self, "indices", np.asarray(self.indices, dtype=np.int64).reshape(-1))

    def __len__(self) -> int:
        return len(self.indices)


def backproject(
    dm: DepthMap, k: CameraIntrinsics, labels: PartLabeling, img: Image, frame_index: int = 0
) -> tuple[PointCloud, int]:
    """Lift every labeled pixel with valid depth to a 3-D camera-frame point.

    Returns the cloud and the count of labeled pixels skipped for invalid
    depth.
    """
    lab = labels.labels
    wanted = lab > 0
    usable = wanted & dm.valid
    skipped = int(np.count_nonzero(wanted & ~dm.valid))
    ys, xs = np.nonzero(usable)
    pix = np.stack([xs, ys], axis=1).astype(float)
    rays = k.backproject_directions(pix)
    pts = rays * dm.d[ys, xs][:, None]
    cloud = PointCloud(
        points=pts,
        labels=lab[ys, xs],
        source_frame=np.full(len(pts), frame_index),
        colors=img.pixels[ys, xs],
        pixels=pix,
    )
    return cloud, skipped


def recover_scale(
    pc: PointCloud, f: FlowField, depth_next: DepthMap, m: RigidMotion, k: CameraIntrinsics
) -> RigidMotion:
    """Fix the metric scale of a unit-norm epipolar translation using depth.

    Least-squares fit of s in x' - R x = s * t_hat over points with valid
    flow and valid next-frame depth, where x' is the next frame's
    back-projection at p + F(p).
    """
    if m.scale_known:
        return m
    if len(pc) == 0:
        raise InsufficientSupportError("no points to recover scale from")
    pix = pc.pixels
    uf, _ = sample_bilinear(f.u, pix)
    vf, _ = sample_bilinear(f.v, pix)
    fvalid, _ = sample_bilinear(f.valid.astype(float), pix)
    p_next = pix + np.stack([uf, vf], axis=1)

    d_next, oob = sample_bilinear(depth_next.d, p_next)
    dvalid, _ = sample_bilinear(depth_next.valid.astype(float), p_next)
    ok = (fvalid > 0.999) & (dvalid > 0.999) & ~oob & (d_next > 0)
    if not ok.any():
        raise InsufficientSupportError("no point has valid flow and next-frame depth")
    x_next = k.backproject_directions(p_next[ok]) * d_next[ok][:, None]
    delta = x_next - pc.points[ok] @ m.rotation.T
    s = float(np.mean(delta @ m.translation))
    return RigidMotion(m.rotation, s * m.translation, scale_known=True)


def _reproject_residuals(
    pc: PointCloud, f: FlowField, m: RigidMotion, k: CameraIntrinsics
) -> tuple[np.ndarray, np.ndarray]:
    """Per-point ||(p + F(p)) - proj(K (R X + t))|| and a behind-camera mask."""
    uf, _ = sample_bilinear(f.u, pc.pixels)
    vf, _ = sample_bilinear(f.v, pc.pixels)
    target = pc.pixels + np.stack([uf, vf], axis=1)
    moved = pc.points @ m.rotation.T + m.translation
    behind = moved[:, 2] <= 1e-9
    proj = np.full((len(pc), 2), np.inf)
    if (~behind).any():
        proj[~behind] = k.project(moved[~behind])
    res = np.linalg.norm(target - proj, axis=1)
    res[behind] = np.inf
    return res, behind


def select_inliers(
    pc: PointCloud, f: FlowField, m: RigidMotion, k: CameraIntrinsics, t: float
) -> InlierSet:
    """Points whose flow endpoint matches the reprojected metric motion within t px.

    Points landing behind the camera are excluded and counted.
    """
    if not m.scale_known:
        raise ValueError("select_inliers needs a metric motion; recover scale first")
    if len(pc) == 0:
        return InlierSet(np.zeros(0, dtype=int), t)
    res, behind = _reproject_residuals(pc, f, m, k)
    return InlierSet(np.nonzero(res < t)[0], t, n_behind=int(behind.sum()))


@dataclass(frozen=True)
class PairPoseResult:
    motion: RigidMotion
    inliers: InlierSet
    initial_rms_px: float
    final_rms_px: float
    iterations: int


def _rotvec_matrix(w: np.ndarray) -> np.ndarray:
    from scipy.spatial.transform import Rotation

    return Rotation.from_rotvec(w).as_matrix()


def _huber_cost(norms: np.ndarray, s: float) -> float:
    small = norms <= s
    cost = np.where(small, norms**2, s * (2.0 * norms - s))
    return float(cost.mean())


def refine_pair_pose(
    pc: PointCloud,
    f: FlowField,
    m0: RigidMotion,
    k: CameraIntrinsics,
    t: float,
    max_iterations: int = 50,
) -> PairPoseResult:
    """Damped Gauss-Newton on the mean squared reprojection residual.

    Optimizes the full 6-DoF motion (left-multiplied rotation increment +
    translation offset) over the inliers of ``m0``.  Residuals are
    Huber-weighted at a scale set robustly from their own distribution (and
    refreshed once after the first convergence): the reprojection objective
    of a small part has a shallow rotation/translation valley, and without
    the weighting a single mislabeled pixel inside the inlier gate can drag
    the pose degrees away from the optimum.  Steps that do not reduce the
    objective raise the damping and are retried, so the objective is
    non-increasing.  Inliers are re-selected once at the end.
    """
    inliers0 = select_inliers(pc, f, m0, k, t)
    if len(inliers0) < 3:
        raise InsufficientSupportError(f"only {len(inliers0)} inliers under the initial pose")
    sub = pc.subset(inliers0.indices)

    uf, _ = sample_bilinear(f.u, sub.pixels)
    vf, _ = sample_bilinear(f.v, sub.pixels)
    target = sub.pixels + np.stack([uf, vf], axis=1)

    def residual_vec(rot: np.ndarray, trans: np.ndarray) -> np.ndarray:
        moved = sub.points @ rot.T + trans
        z = np.maximum(moved[:, 2], 1e-9)
        proj = np.stack(
            [k.fx * moved[:, 0] / z + k.cx, k.fy * moved[:, 1] / z + k.cy], axis=1
        )
        r = (target - proj).ravel()
        bad = moved[:, 2] <= 1e-9
        if bad.any():
            r = r.copy()
            r.reshape(-1, 2)[bad] = 1e6  # behind-camera penalty keeps support fixed
        return r

    def huber_scale(r: np.ndarray) -> float:
        norms = np.linalg.norm(r.reshape(-1, 2), axis=1)
        mad = float(np.median(np.abs(norms - np.median(norms))))
        return max(1.4826 * mad, 0.02)

    rot, trans = m0.rotation, m0.translation.copy()
    r = residual_vec(rot, trans)
    initial_rms = float(np.sqrt((r @ r) / (2 * len(sub))))

    h = 1e-6
    iterations = 0
    for _phase in range(2):
        s = huber_scale(residual_vec(rot, trans))
        r = residual_vec(rot, trans)
        cost = _huber_cost(np.linalg.norm(r.reshape(-1, 2), axis=1), s)
        phase_start_cost = cost
        lam = 1e-3
        converged = False
        while not converged and iterations < max_iterations:
            iterations += 1
            norms = np.linalg.norm(r.reshape(-1, 2), axis=1)
            w = np.sqrt(np.minimum(1.0, s / np.maximum(norms, 1e-12)))
            wv = np.repeat(w, 2)
            jac = np.empty((len(r), 6))
            for j in range(6):
                dp = np.zeros(6)
                dp[j] = h
                rp = residual_vec(_rotvec_matrix(dp[:3]) @ rot, trans + dp[3:])
                rm = residual_vec(_rotvec_matrix(-dp[:3]) @ rot, trans - dp[3:])
                jac[:, j] = (rp - rm) / (2 * h)
            jw = jac * wv[:, None]
            g = jw.T @ (r * wv)
            jtj = jw.T @ jw
            accepted = False
            for _ in range(8):
                try:
                    delta = np.linalg.solve(jtj + lam * np.eye(6), -g)
                except np.linalg.LinAlgError:
                    lam *= 10.0
                    continue
                cand_rot = _rotvec_matrix(delta[:3]) @ rot
                cand_trans = trans + delta[3:]
                rc = residual_vec(cand_rot, cand_trans)
                cand_cost = _huber_cost(np.linalg.norm(rc.reshape(-1, 2), axis=1), s)
                if cand_cost <= cost:
                    improvement = cost - cand_cost
                    rot, trans, r, cost = cand_rot, cand_trans, rc, cand_cost
                    lam = max(lam * 0.5, 1e-12)
                    accepted = improvement >= 1e-14 * max(cost, 1.0)
                    break
                lam *= 10.0
            if not accepted:
                converged = True
        if cost > phase_start_cost + 1e-9:
            raise MonotonicityError("pair-pose refinement increased its objective")

    final = RigidMotion(rot, trans, scale_known=True)
    r_final = residual_vec(rot, trans)
    inliers = select_inliers(pc, f, final, k, t)
    final_rms = float(np.sqrt((r_final @ r_final) / (2 * len(sub))))
    return PairPoseResult(final, inliers, initial_rms, final_rms, iterations)


def advance_pixels(pixels: np.ndarray, valid: np.ndarray, f: FlowField) -> tuple[np.ndarray, np.ndarray]:
    """Push tracked pixels through one flow field (bilinear), updating validity.

    A trace survives only where the flow is valid in all four sampled
    neighbors and the landing point stays inside the image.
    """
    u, _ = sample_bilinear(f.u, pixels)
    v, _ = sample_bilinear(f.v, pixels)
    fvalid, oob = sample_bilinear(f.valid.astype(float), pixels)
    new_pix = pixels + np.stack([u, v], axis=1)
    h, w = f.shape
    inb = (
        (new_pix[:, 0] >= 0)
        & (new_pix[:, 0] <= w - 1)
        & (new_pix[:, 1] >= 0)
        & (new_pix[:, 1] <= h - 1)
    )
    new_valid = valid & (fvalid > 0.999) & ~oob & inb
    out_pix = np.where(new_valid[:, None], new_pix, pixels)
    return out_pix, new_valid


def trace_cloud(pc: PointCloud, flows) -> PointCloud:
    """Advance a cloud's pixels through a list of consecutive flow fields."""
    pixels, valid = pc.pixels, pc.pixel_valid
    for f in flows:
        pixels, valid = advance_pixels(pixels, valid, f)
    return replace(pc, pixels=pixels, pixel_valid=valid)


def _link_pose_matrix(
    chain: KinematicChain, cam_pose: FramePose, angles: np.ndarray, link: int
) -> np.ndarray:
    """4x4 camera-frame pose of a link: world->camera o model FK."""
    return cam_pose.inverse().matrix() @ chain.link_transform(angles, link)


def accumulate_cloud(
    clouds, traj: JointTrajectory, chain: KinematicChain, cam_pose: FramePose
) -> PointCloud:
    """Merge per-pair clouds into the frame-1 (zero-configuration) world pose.

    Each cloud's points (camera frame, captured at its source frame) are
    pulled back through the link's forward kinematics at the accumulated
    angles of that frame, then pushed forward at the first row (zeros).
    Tracked pixels and validity are preserved.
    """
    out = []
    for pc in clouds:
        if len(pc) == 0:
            continue
        pts = pc.points.copy()
        for link in sorted(set(pc.labels.tolist())):
            sel = pc.labels == link
            frames = pc.source_frame[sel]
            new_pts = np.empty((int(sel.sum()), 3))
            world_from_link0 = chain.link_transform(np.zeros(traj.dof), link - 1)
            for fr in np.unique(frames):
                t_cam = _link_pose_matrix(chain, cam_pose, traj.angles[fr], link - 1)
                m = world_from_link0 @ np.linalg.inv(t_cam)
                sub = pc.points[sel][frames == fr]
                new_pts[frames == fr] = sub @ m[:3, :3].T + m[:3, 3]
            pts[sel] = new_pts
        out.append(replace(pc, points=pts))
    return PointCloud.concatenate(out)


@dataclass(frozen=True)
class FinalBaConfig:
    learning_rate: float = 1e-3
    grad_step_rad: float = 1e-4
    max_iterations: int = 80
    max_backtracks: int = 6
    min_improvement: float = 1e-7  # stop once an iteration gains less than this
    flat_grad_threshold: float = 1e-7
    low_confidence: float = 0.1


@dataclass(frozen=True)
class FinalBaInfo:
    initial_objective: float
    final_objective: float
    iterations: int
    flat: bool


def final_ba(
    i_n: Image,
    pc: PointCloud,
    traj: JointTrajectory,
    chain: KinematicChain,
    k: CameraIntrinsics,
    cam_pose: FramePose,
    cfg: FinalBaConfig = FinalBaConfig(),
) -> tuple[JointTrajectory, FinalBaInfo]:
    """Photometric adjustment of the final-row joint angles.

    Minimizes the mean color difference between the last image sampled at
    each accumulated point's traced pixel and at its reprojection under the
    trial final angles, by gradient descent (central differences per joint,
    backtracking on non-improvement, objective non-increasing).  On a flat
    objective (e.g. uniform-color parts) the angles are returned unchanged
    and the final row is marked low-confidence.
    """
    usable = pc.pixel_valid & (pc.labels > 0)
    sub = pc.subset(np.nonzero(usable)[0])
    if len(sub) == 0:
        raise NoOverlapError("no accumulated point carries a live pixel trace")
    ref, _ = sample_bilinear(i_n.pixels, sub.pixels)

    zero = np.zeros(traj.dof)
    wc = cam_pose.inverse().matrix()

    def objective(theta: np.ndarray) -> float:
        total = 0.0
        n_in = 0
        for link in range(1, traj.dof + 1):
            sel = sub.labels == link
            if not sel.any():
                continue
            t_now = wc @ chain.link_transform(theta, link - 1)
            t_zero = chain.link_transform(zero, link - 1)
            m = t_now @ np.linalg.inv(t_zero)
            moved = sub.points[sel] @ m[:3, :3].T + m[:3, 3]
            z = moved[:, 2]
            front = z > 1e-9
            res = np.full(int(sel.sum()), np.sqrt(3.0))  # max color distance
            if front.any():
                proj = k.project(moved[front])
                samp, oob = sample_bilinear(i_n.pixels, proj)
                res[front] = np.linalg.norm(ref[sel][front] - samp, axis=1)
                n_in += int((~oob).sum())
            total += float(res.sum())
        if n_in == 0:
            raise NoOverlapError("no point projects inside the image")
        return total / len(sub)

    theta = traj.angles[-1].copy()
    obj0 = objective(theta)

    # Initial in-image check: literal no-overlap means nothing to optimize.
    grad = np.zeros(traj.dof)
    h = cfg.grad_step_rad
    obj = obj0
    iterations = 0
    flat = False
    for iterations in range(1, cfg.max_iterations + 1):
        for j in range(traj.dof):
            dp = theta.copy()
            dm = theta.copy()
            dp[j] += h
            dm[j] -= h
            grad[j] = (objective(dp) - objective(dm)) / (2 * h)
        gnorm = float(np.linalg.norm(grad))
        if iterations == 1 and gnorm < cfg.flat_grad_threshold:
            flat = True
            break
        lr = cfg.learning_rate
        accepted = False
        for _ in range(cfg.max_backtracks + 1):
            cand = theta - lr * grad
            cand_obj = objective(cand)
            if cand_obj < obj - 1e-15:
                gained = obj - cand_obj
                theta, obj = cand, cand_obj
                accepted = gained >= cfg.min_improvement
                break
            lr *= 0.5
        if not accepted:
            break
    if obj > obj0 + 1e-12:
        raise MonotonicityError("final bundle adjustment increased its objective")

    angles = traj.angles.copy()
    conf = traj.confidence.copy()
    angles[-1] = theta
    if flat:
        conf[-1] = np.minimum(conf[-1], cfg.low_confidence)
    return JointTrajectory(angles, conf), FinalBaInfo(obj0, obj, iterations, flat)


def write_ply(pc: PointCloud, path) -> None:
    """ASCII PLY export (x y z, uint8 color, part label) for inspection."""
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(pc)}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "property int label",
        "end_header",
    ]
    rgb = np.clip(np.rint(pc.colors * 255), 0, 255).astype(int)
    for p, c, lab in zip(pc.points, rgb, pc.labels):
        lines.append(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {c[0]} {c[1]} {c[2]} {int(lab)}")
    Path(path).write_text("\n".join(lines) + "\n")

"""Synthetic articulated-scene generator with exact ground truth.

Scenes are dense colored 3-D point sets attached to the links of a revolute
chain, rendered by z-buffered point splatting.  The ground-truth 3-D point
of a pixel is the point on the pixel's viewing ray at the winning splat's
depth, so depth maps, part masks, optical flow, and back-projection are all
exactly consistent with the scheduled rigid motions: the point visible at p
in frame k projects to p + F_k(p) in frame k+1 by construction.
"""

from __future__ import annotations

import json
import warnings
import zlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .flow import DepthMap, FlowField, Image, FLO_INVALID
from .geometry import CameraIntrinsics, RigidMotion
from .kinematics import FramePose, Joint, KinematicChain, rotation_about_axis
from .segmentation import PartLabeling


@dataclass(frozen=True)
class PartPoints:
    """One rigid part: points and colors in the part's local frame."""

    points: np.ndarray  # (N, 3)
    colors: np.ndarray  # (N, 3) in [0, 1]

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        col = np.asarray(self.colors, dtype=float).reshape(-1, 3)
        if len(pts) == 0:
            raise ValueError("a part needs at least one point")
        if len(pts) != len(col):
            raise ValueError("points and colors must align")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "colors", np.clip(col, 0.0, 1.0))


@dataclass(frozen=True)
class ArticulatedScene:
    """Ground-truth scene: chain, per-link geometry, camera, joint schedule.

    ``parts[i]`` is attached to joint i of the chain (label i+1 in masks);
    ``static_parts`` are world-fixed geometry rendered as label 0.  The
    chain's model root coincides with the world frame.
    """

    chain: KinematicChain
    parts: tuple[PartPoints, ...]
    static_parts: tuple[PartPoints, ...]
    camera: CameraIntrinsics
    cam_pose: FramePose  # camera -> world
    schedule: np.ndarray  # (n_frames, dof) radians
    background_color: tuple[float, float, float] = (0.36, 0.38, 0.42)
    splat_radius: float = 1.5
    occlusion_tol: float = 0.02
    name: str = "custom"
    seed: int = 0

    def __post_init__(self):
        sched = np.atleast_2d(np.asarray(self.schedule, dtype=float))
        if not np.isfinite(sched).all():
            raise ValueError("schedule must be finite")
        if sched.shape[1] != self.chain.dof:
            raise ValueError("schedule width must equal the chain DoF")
        if len(self.parts) != self.chain.dof:
            raise ValueError("one moving part per joint is required")
        object.__setattr__(self, "schedule", sched)

    @property
    def n_frames(self) -> int:
        return self.schedule.shape[0]

    @property
    def dof(self) -> int:
        return self.chain.dof


@dataclass(frozen=True)
class RenderedFrame:
    """One frame of ground truth.  ``flow`` is None for the last frame.

    ``point_map`` holds each rendered pixel's ground-truth 3-D point in
    camera coordinates (NaN where nothing was hit).
    """

    image: Image
    depth: DepthMap
    mask: PartLabeling
    flow: FlowField | None
    point_map: np.ndarray


def pose_points(scene: ArticulatedScene, frame: int) -> list[np.ndarray]:
    """Per-label posed points in camera coordinates; index 0 is the static set."""
    if not 0 <= frame < scene.n_frames:
        raise IndexError(f"frame {frame} outside 0..{scene.n_frames - 1}")
    world_to_cam = scene.cam_pose.inverse()
    out: list[np.ndarray] = []
    if scene.static_parts:
        static = np.concatenate([p.points for p in scene.static_parts], axis=0)
        out.append(world_to_cam.apply(static))
    else:
        out.append(np.zeros((0, 3)))
    angles = scene.schedule[frame]
    for i, part in enumerate(scene.parts):
        t = scene.chain.link_transform(angles, i)
        world = part.points @ t[:3, :3].T + t[:3, 3]
        out.append(world_to_cam.apply(world))
    return out


def part_pair_motions(scene: ArticulatedScene, frame: int) -> list[RigidMotion]:
    """Camera-frame rigid motion of every label (0..dof) from frame to frame+1."""
    wc = scene.cam_pose.inverse().matrix()
    cw = scene.cam_pose.matrix()
    motions = [RigidMotion.identity()]
    for i in range(scene.dof):
        t0 = scene.chain.link_transform(scene.schedule[frame], i)
        t1 = scene.chain.link_transform(scene.schedule[frame + 1], i)
        m = wc @ t1 @ np.linalg.inv(t0) @ cw
        motions.append(RigidMotion(m[:3, :3], m[:3, 3]))
    return motions


def _splat_offsets(radius: float) -> np.ndarray:
    r = int(np.ceil(radius))
    dx, dy = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1))
    keep = dx**2 + dy**2 <= radius**2
    return np.stack([dx[keep], dy[keep]], axis=1)


def _zbuffer(scene: ArticulatedScene, frame: int, posed: list[np.ndarray]):
    """Point-splat z-buffer.

    Returns (winner (H,W) global point index or -1, depth (H,W), plus the
    flattened per-point label and color arrays the indices refer to).
    """
    k = scene.camera
    h, w = k.height, k.width
    all_pts = np.concatenate(posed, axis=0)
    labels = np.concatenate(
        [np.full(len(p), lab, dtype=np.int32) for lab, p in enumerate(posed)]
    )
    colors_parts = [p.colors for p in scene.static_parts] or [np.zeros((0, 3))]
    colors = np.concatenate(list(colors_parts) + [p.colors for p in scene.parts], axis=0)

    z = all_pts[:, 2]
    front = z > 1e-6
    pix = k.project(all_pts[front])
    zf = z[front]
    idxf = np.nonzero(front)[0]

    ix = np.rint(pix[:, 0]).astype(int)
    iy = np.rint(pix[:, 1]).astype(int)
    offsets = _splat_offsets(scene.splat_radius)

    cand_pix = []
    cand_key = []
    # Pack (z, point index) into one sortable uint64 so the winner per pixel
    # falls out of a single scatter-min.  Positive float32 bit patterns are
    # monotone in the float value, so the nearest z wins, ties broken by the
    # lowest point index (deterministic).
    z_bits = zf.astype(np.float32).view(np.uint32).astype(np.uint64)
    key_all = (z_bits << np.uint64(30)) | idxf.astype(np.uint64)
    for dx, dy in offsets:
        cx = ix + dx
        cy = iy + dy
        ok = (cx >= 0) & (cx < w) & (cy >= 0) & (cy < h)
        cand_pix.append(cy[ok] * w + cx[ok])
        cand_key.append(key_all[ok])
    flat_pix = np.concatenate(cand_pix)
    flat_key = np.concatenate(cand_key)

    winner = np.full(h * w, -1, dtype=np.int64)
    depth = np.zeros(h * w, dtype=float)
    if flat_pix.size:
        best = np.full(h * w, np.iinfo(np.uint64).max, dtype=np.uint64)
        np.minimum.at(best, flat_pix, flat_key)
        hit = best != np.iinfo(np.uint64).max
        winner[hit] = (best[hit] & np.uint64((1 << 30) - 1)).astype(np.int64)
        depth[hit] = (best[hit] >> np.uint64(30)).astype(np.uint32).view(np.float32).astype(float)
    return winner.reshape(h, w), depth.reshape(h, w), labels, colors


def render(scene: ArticulatedScene, frame: int) -> RenderedFrame:
    """Render one frame with exact depth, mask, per-pixel 3-D points, and flow.

    Flow maps each hit pixel's ground-truth 3-D point through its part's
    scheduled motion to the next frame; it is marked invalid where that
    projection leaves the image or is occluded.  Pixels that hit nothing get
    zero flow (the scene and camera are static there).  Warns-by-count, not
    by exception, when a part is entirely behind the camera.
    """
    posed = pose_points(scene, frame)
    for label in range(1, scene.dof + 1):
        if not (posed[label][:, 2] > 1e-6).any():
            warnings.warn(f"part {label} lies entirely behind the camera in frame {frame}")
    winner, depth, labels, _colors = _zbuffer(scene, frame, posed)
    k = scene.camera
    h, w = k.height, k.width

    hit = winner >= 0
    mask = np.zeros((h, w), dtype=np.int32)
    mask[hit] = labels[winner[hit]]

    image = np.empty((h, w, 3))
    image[:] = np.asarray(scene.background_color)
    image[hit] = _colors[winner[hit]]

    # Ground-truth 3-D point per pixel: pixel-center ray at winner depth.
    ys, xs = np.nonzero(hit)
    zs = depth[ys, xs]
    rays = k.backproject_directions(np.stack([xs, ys], axis=1).astype(float))
    point_map = np.full((h, w, 3), np.nan)
    point_map[ys, xs] = rays * zs[:, None]

    flow = None
    if frame + 1 < scene.n_frames:
        u = np.zeros((h, w), dtype=np.float32)
        v = np.zeros((h, w), dtype=np.float32)
        valid = np.ones((h, w), dtype=bool)
        motions = part_pair_motions(scene, frame)
        posed_next = pose_points(scene, frame + 1)
        _, depth_next, _, _ = _zbuffer(scene, frame + 1, posed_next)

        px_labels = mask[ys, xs]
        pts = point_map[ys, xs]
        moved = np.empty_like(pts)
        for lab in range(scene.dof + 1):
            sel = px_labels == lab
            if sel.any():
                moved[sel] = motions[lab].apply(pts[sel])
        z_next = moved[:, 2]
        ok = z_next > 1e-6
        proj = np.full((len(pts), 2), np.nan)
        proj[ok] = k.project(moved[ok])
        inb = ok & (proj[:, 0] >= 0) & (proj[:, 0] <= w - 1) & (proj[:, 1] >= 0) & (proj[:, 1] <= h - 1)
        # Occlusion: the moved point must be the surface the next frame sees.
        vis = inb.copy()
        if inb.any():
            nx = np.clip(np.rint(proj[inb, 0]).astype(int), 0, w - 1)
            ny = np.clip(np.rint(proj[inb, 1]).astype(int), 0, h - 1)
            zbuf = depth_next[ny, nx]
            vis[inb] = (zbuf > 0) & (z_next[inb] <= zbuf + scene.occlusion_tol)
        u[ys, xs] = np.where(vis, proj[:, 0] - xs, FLO_INVALID)
        v[ys, xs] = np.where(vis, proj[:, 1] - ys, FLO_INVALID)
        valid[ys, xs] = vis
        flow = FlowField(u, v, valid)

    return RenderedFrame(
        image=Image(image),
        depth=DepthMap(depth.astype(np.float32), hit),
        mask=PartLabeling(mask, scene.dof),
        flow=flow,
        point_map=point_map,
    )


def render_sequence(scene: ArticulatedScene) -> list[RenderedFrame]:
    return [render(scene, i) for i in range(scene.n_frames)]


@dataclass(frozen=True)
class NoiseSpec:
    """Additive Gaussian degradation of ground-truth channels."""

    flow_sigma_px: float = 0.0
    depth_sigma: float = 0.0
    seed: int = 0


def perturb(frame: RenderedFrame, noise: NoiseSpec) -> RenderedFrame:
    """Deterministically degrade a frame's flow and/or depth (valid pixels only)."""
    rng = np.random.default_rng(noise.seed)
    flow = frame.flow
    if flow is not None and noise.flow_sigma_px > 0:
        u = flow.u.copy()
        v = flow.v.copy()
        n = int(flow.valid.sum())
        du = rng.normal(0.0, noise.flow_sigma_px, size=n)
        dv = rng.normal(0.0, noise.flow_sigma_px, size=n)
        u[flow.valid] += du.astype(np.float32)
        v[flow.valid] += dv.astype(np.float32)
        flow = FlowField(u, v, flow.valid.copy())
    depth = frame.depth
    if noise.depth_sigma > 0:
        d = depth.d.copy()
        n = int(depth.valid.sum())
        d[depth.valid] += rng.normal(0.0, noise.depth_sigma, size=n).astype(np.float32)
        depth = DepthMap(d, depth.valid.copy())
    if flow is frame.flow and depth is frame.depth:
        return frame
    return replace(frame, flow=flow, depth=depth)


# ---------------------------------------------------------------------------
# Procedural geometry + texture
# ---------------------------------------------------------------------------


def _hash01(ix: np.ndarray, iy: np.ndarray, iz: np.ndarray, seed: int) -> np.ndarray:
    """Deterministic lattice hash -> [0, 1)."""
    h = (
        ix.astype(np.uint64) * np.uint64(0x9E3779B185EBCA87)
        + iy.astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F)
        + iz.astype(np.uint64) * np.uint64(0x165667B19E3779F9)
        + np.uint64(seed * 0x27D4EB2F165667C5 % (1 << 64))
    )
    h ^= h >> np.uint64(33)
    h *= np.uint64(0xFF51AFD7ED558CCD)
    h ^= h >> np.uint64(33)
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def _value_noise(points: np.ndarray, scale: float, seed: int) -> np.ndarray:
    """Smooth 3-D value noise in [0, 1] sampled at (N, 3) points."""
    q = points / scale
    q0 = np.floor(q)
    f = q - q0
    f = f * f * (3.0 - 2.0 * f)  # smoothstep
    out = np.zeros(len(points))
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                corner = _hash01(
                    (q0[:, 0] + dx).astype(np.int64),
                    (q0[:, 1] + dy).astype(np.int64),
                    (q0[:, 2] + dz).astype(np.int64),
                    seed,
                )
                wx = f[:, 0] if dx else 1 - f[:, 0]
                wy = f[:, 1] if dy else 1 - f[:, 1]
                wz = f[:, 2] if dz else 1 - f[:, 2]
                out += corner * wx * wy * wz
    return out


def _texture_colors(points: np.ndarray, seed: int, base: np.ndarray) -> np.ndarray:
    """Two-octave value-noise color per point around a base tint."""
    n1 = _value_noise(points, 0.06, seed)
    n2 = _value_noise(points, 0.023, seed + 101)
    lum = 0.25 + 0.5 * (0.65 * n1 + 0.35 * n2)
    tint = np.stack(
        [
            _value_noise(points, 0.11, seed + 7),
            _value_noise(points, 0.11, seed + 13),
            _value_noise(points, 0.11, seed + 19),
        ],
        axis=1,
    )
    colors = base[None, :] * (0.55 + 0.9 * lum[:, None]) + 0.25 * (tint - 0.5)
    return np.clip(colors, 0.02, 0.98)


def _box_surface(rng: np.random.Generator, center, size, spacing: float) -> np.ndarray:
    """Uniform samples of a cuboid's surface at roughly ``spacing`` density."""
    center = np.asarray(center, dtype=float)
    size = np.asarray(size, dtype=float)
    half = size / 2.0
    faces = []
    for axis in range(3):
        u_axis, v_axis = [a for a in range(3) if a != axis]
        area = size[u_axis] * size[v_axis]
        n = max(12, int(np.ceil(area / spacing**2)))
        for sign in (-1.0, 1.0):
            uv = rng.uniform(-0.5, 0.5, size=(n, 2))
            pts = np.empty((n, 3))
            pts[:, axis] = sign * half[axis]
            pts[:, u_axis] = uv[:, 0] * size[u_axis]
            pts[:, v_axis] = uv[:, 1] * size[v_axis]
            faces.append(pts)
    return np.concatenate(faces, axis=0) + center


def _plane(rng: np.random.Generator, center, u_vec, v_vec, spacing: float) -> np.ndarray:
    center = np.asarray(center, dtype=float)
    u_vec = np.asarray(u_vec, dtype=float)
    v_vec = np.asarray(v_vec, dtype=float)
    area = np.linalg.norm(u_vec) * np.linalg.norm(v_vec)
    n = max(12, int(np.ceil(area / spacing**2)))
    uv = rng.uniform(-0.5, 0.5, size=(n, 2))
    return center + uv[:, :1] * u_vec + uv[:, 1:] * v_vec


def _look_at_pose(eye, target, up=(0.0, 0.0, 1.0)) -> FramePose:
    """Camera->world pose: camera x right, y down, z toward the target."""
    eye = np.asarray(eye, dtype=float)
    fwd = np.asarray(target, dtype=float) - eye
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=float))
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    r_cw = np.stack([right, down, fwd], axis=1)  # columns = camera axes in world
    return FramePose(r_cw, eye, "camera", "world")


def _random_walk_schedule(
    rng: np.random.Generator, n_frames: int, dof: int, lo: float, hi: float, limit: float
) -> np.ndarray:
    """Per-joint monotone-ish walk with |step| in [lo, hi], reflected at +-limit."""
    sched = np.zeros((n_frames, dof))
    direction = np.where(rng.random(dof) < 0.5, -1.0, 1.0)
    for k in range(1, n_frames):
        step = rng.uniform(lo, hi, size=dof) * direction
        nxt = sched[k - 1] + step
        for j in range(dof):
            if abs(nxt[j]) > limit:
                direction[j] *= -1.0
                nxt[j] = sched[k - 1, j] + rng.uniform(lo, hi) * direction[j]
        sched[k] = nxt
    return sched


PRESETS = ("hinge", "hinge_uniform", "arm2", "arm3", "arm3_uniform")

_UNIFORM_PART_COLORS = np.array(
    [[0.72, 0.30, 0.25], [0.28, 0.55, 0.30], [0.30, 0.38, 0.68]]
)


def make_scene(
    preset: str,
    seed: int = 0,
    frames: int = 15,
    width: int = 128,
    height: int = 96,
) -> ArticulatedScene:
    """Build one of the shipped scene presets, randomized by ``seed``.

    ``hinge``          1-DoF door on a static wall (microwave-door analog).
    ``hinge_uniform``  same door with a uniform (low-texture) color.
    ``arm2``           2-DoF serial arm (yaw + pitch) on a static pedestal.
    ``arm3``           3-DoF serial arm (yaw + 2 pitch), textured links.
    ``arm3_uniform``   same arm with uniform (low-texture) link colors.
    """
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {PRESETS}")
    preset_tag = zlib.crc32(preset.encode()) & 0xFFFF
    rng = np.random.default_rng(np.random.SeedSequence([preset_tag, seed]))

    f = 1.15 * width
    camera = CameraIntrinsics(
        fx=f, fy=f, cx=width / 2.0 - 0.5, cy=height / 2.0 - 0.5, width=width, height=height
    )
    spacing = 0.0065 * (128.0 / width)  # point spacing tuned for <1 px at ~1.4 m

    uniform = preset.endswith("_uniform")
    if preset.startswith("hinge"):
        chain = KinematicChain(
            (Joint(np.array([0.0, 0.0, 1.0]), np.array([0.22, 0.0, 0.45]), -1),)
        )
        door = _box_surface(rng, center=(-0.20, 0.015, 0.0), size=(0.40, 0.03, 0.55), spacing=spacing)
        # The zero configuration has the door ajar: rotation of a door lying
        # in the wall plane is almost pure depth change and leaves no image
        # motion to work with.  The ajar angle and the camera azimuth below
        # are kept in ranges where the door face stays well visible over the
        # whole scheduled swing.
        ajar = rng.uniform(np.radians(38.0), np.radians(48.0))
        rot = rotation_about_axis(np.array([0.0, 0.0, 1.0]), ajar)
        door = door @ rot.T
        colors = (
            np.tile(np.array([0.72, 0.30, 0.25]), (len(door), 1))
            if uniform
            else _texture_colors(door, seed * 31 + 5, np.array([0.75, 0.62, 0.45]))
        )
        parts = (PartPoints(door, colors),)
        wall = _plane(rng, (0.0, 0.25, 0.45), (1.7, 0.0, 0.0), (0.0, 0.0, 1.2), spacing * 1.6)
        frame_box = _box_surface(rng, center=(0.28, 0.0, 0.45), size=(0.08, 0.08, 0.62), spacing=spacing)
        statics = (
            PartPoints(wall, _texture_colors(wall, seed * 31 + 11, np.array([0.5, 0.55, 0.6]))),
            PartPoints(frame_box, _texture_colors(frame_box, seed * 31 + 17, np.array([0.45, 0.4, 0.38]))),
        )
        target = np.array([0.0, 0.0, 0.45])
        sched = _random_walk_schedule(rng, frames, 1, np.radians(10.0), np.radians(16.0), np.radians(13.0))
        dist_range = (1.35, 1.6)
        az_range = (-0.05, 0.05)
    else:
        dof = 2 if preset == "arm2" else 3
        joints = [Joint(np.array([0.0, 0.0, 1.0]), np.array([0.0, 0.0, 0.20]), -1)]
        link_tops = [0.24, 0.30]
        if dof >= 2:
            joints.append(Joint(np.array([0.0, 1.0, 0.0]), np.array([0.0, 0.0, link_tops[0]]), 0))
        if dof >= 3:
            joints.append(Joint(np.array([0.0, 1.0, 0.0]), np.array([0.0, 0.0, link_tops[1]]), 1))
        chain = KinematicChain(tuple(joints))

        sizes = [(0.22, 0.22, 0.22), (0.16, 0.16, 0.30), (0.12, 0.12, 0.26)]
        centers = [(0.0, 0.0, 0.11), (0.0, 0.0, 0.14), (0.015, 0.0, 0.11)]
        bases = [np.array([0.72, 0.35, 0.3]), np.array([0.35, 0.62, 0.35]), np.array([0.35, 0.42, 0.72])]
        parts_list = []
        for i in range(dof):
            pts = _box_surface(rng, centers[i], sizes[i], spacing)
            if uniform:
                colors = np.tile(_UNIFORM_PART_COLORS[i], (len(pts), 1))
            else:
                colors = _texture_colors(pts, seed * 31 + 5 + i, bases[i])
            parts_list.append(PartPoints(pts, colors))
        parts = tuple(parts_list)

        pedestal = _box_surface(rng, center=(0.0, 0.0, 0.09), size=(0.30, 0.30, 0.18), spacing=spacing)
        statics = (
            PartPoints(pedestal, _texture_colors(pedestal, seed * 31 + 3, np.array([0.5, 0.48, 0.45]))),
        )
        target = np.array([0.0, 0.0, 0.30 + 0.15 * dof])
        sched = _random_walk_schedule(
            rng, frames, dof, np.radians(2.0), np.radians(5.0), np.radians(35.0)
        )
        dist_range = (1.25, 1.45)
        az_range = (-0.45, 0.45)

    az = rng.uniform(*az_range)
    dist = rng.uniform(*dist_range)
    elev = rng.uniform(0.55, 0.85)
    eye = np.array([dist * np.sin(az), -dist * np.cos(az), elev])
    cam_pose = _look_at_pose(eye, target)

    return ArticulatedScene(
        chain=chain,
        parts=parts,
        static_parts=statics,
        camera=camera,
        cam_pose=cam_pose,
        schedule=sched,
        name=preset,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# On-disk scene format
# ---------------------------------------------------------------------------

MANIFEST_NAME = "manifest.json"
SCENE_FORMAT = "artipose-scene-v1"


def scene_manifest(scene: ArticulatedScene) -> dict:
    return {
        "format": SCENE_FORMAT,
        "preset": scene.name,
        "seed": scene.seed,
        "frames": scene.n_frames,
        "width": scene.camera.width,
        "height": scene.camera.height,
        "camera": {
            "fx": scene.camera.fx,
            "fy": scene.camera.fy,
            "cx": scene.camera.cx,
            "cy": scene.camera.cy,
            "width": scene.camera.width,
            "height": scene.camera.height,
        },
        "camera_pose": {
            "rotation": scene.cam_pose.rotation.tolist(),
            "translation": scene.cam_pose.translation.tolist(),
            "from": "camera",
            "to": "world",
        },
        "chain": scene.chain.to_dict(),
        "schedule_rad": scene.schedule.tolist(),
        "units": "scene_units",
        "files": {
            "image": "image_%03d.png",
            "depth": "depth_%03d.raw",
            "mask": "mask_%03d.png",
            "flow": "flow_%03d.flo",
        },
    }


def write_scene(scene: ArticulatedScene, frames: list[RenderedFrame], out_dir) -> dict:
    """Write rendered frames plus the ground-truth manifest; returns the manifest."""
    from PIL import Image as PILImage

    from .flow import write_depth, write_flo, write_image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = scene_manifest(scene)
    for i, fr in enumerate(frames):
        write_image(fr.image, out / (manifest["files"]["image"] % i))
        d = fr.depth.d.copy()
        d[~fr.depth.valid] = 0.0
        write_depth(DepthMap(d, fr.depth.valid), out / (manifest["files"]["depth"] % i))
        PILImage.fromarray(fr.mask.labels.astype(np.uint8), mode="L").save(
            out / (manifest["files"]["mask"] % i)
        )
        if fr.flow is not None:
            u = fr.flow.u.copy()
            v = fr.flow.v.copy()
            u[~fr.flow.valid] = FLO_INVALID
            v[~fr.flow.valid] = FLO_INVALID
            write_flo(FlowField(u, v, fr.flow.valid), out / (manifest["files"]["flow"] % i))
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest

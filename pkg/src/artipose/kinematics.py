"""Coordinate-frame bookkeeping, revolute-joint angle extraction, accumulation.

Frames are tagged "camera", "world", "model".  A revolute chain stores each
joint's axis and origin in its parent's frame; the model frame of joint i is
the parent chain's pose composed with the joint-origin offset, so the axis
direction is constant there and the per-pair motion of link i relative to
its parent is a pure rotation about it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import FrameTagError
from .geometry import RigidMotion

FRAME_TAGS = ("camera", "world", "model")


@dataclass(frozen=True)
class FramePose:
    """Rigid transform carrying coordinates of ``from_frame`` into ``to_frame``."""

    rotation: np.ndarray
    translation: np.ndarray
    from_frame: str
    to_frame: str

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-9 or np.linalg.det(r) < 0:
            raise ValueError("FramePose rotation must be orthonormal with det +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def inverse(self) -> "FramePose":
        return FramePose(
            self.rotation.T, -self.rotation.T @ self.translation, self.to_frame, self.from_frame
        )

    def compose(self, inner: "FramePose") -> "FramePose":
        """self after inner; requires inner.to_frame == self.from_frame."""
        if inner.to_frame != self.from_frame:
            raise FrameTagError(
                f"cannot compose {self.from_frame}->{self.to_frame} with "
                f"{inner.from_frame}->{inner.to_frame}"
            )
        return FramePose(
            self.rotation @ inner.rotation,
            self.rotation @ inner.translation + self.translation,
            inner.from_frame,
            self.to_frame,
        )

    @classmethod
    def identity(cls, from_frame: str, to_frame: str) -> "FramePose":
        return cls(np.eye(3), np.zeros(3), from_frame, to_frame)


def rotation_about_axis(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues rotation about a unit axis."""
    a = np.asarray(axis, dtype=float).reshape(3)
    c = np.cos(angle)
    s = np.sin(angle)
    cross = np.array([[0.0, -a[2], a[1]], [a[2], 0.0, -a[0]], [-a[1], a[0], 0.0]])
    return c * np.eye(3) + s * cross + (1.0 - c) * np.outer(a, a)


@dataclass(frozen=True)
class Joint:
    """Revolute joint: unit axis and origin expressed in the parent frame."""

    axis: np.ndarray
    origin: np.ndarray
    parent: int  # index of the parent joint, -1 for the base

    def __post_init__(self):
        axis = np.asarray(self.axis, dtype=float).reshape(3)
        if abs(np.linalg.norm(axis) - 1.0) > 1e-12:
            raise ValueError("joint axis must be unit-norm within 1e-12")
        object.__setattr__(self, "axis", axis)
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float).reshape(3))


@dataclass(frozen=True)
class KinematicChain:
    joints: tuple[Joint, ...]

    def __post_init__(self):
        joints = tuple(self.joints)
        for i, j in enumerate(joints):
            if not -1 <= j.parent < i:
                raise ValueError("parent indices must be acyclic (parent < child, -1 for base)")
        object.__setattr__(self, "joints", joints)

    @property
    def dof(self) -> int:
        return len(self.joints)

    def _transforms(self, angles: np.ndarray) -> list[np.ndarray]:
        """4x4 model-root -> link-i transforms for all joints."""
        angles = np.asarray(angles, dtype=float).reshape(self.dof)
        out: list[np.ndarray] = []
        for i, j in enumerate(self.joints):
            t = np.eye(4)
            t[:3, :3] = rotation_about_axis(j.axis, angles[i])
            base = np.eye(4)
            base[:3, 3] = j.origin
            local = base @ t
            out.append(local if j.parent < 0 else out[j.parent] @ local)
        return out

    def link_transform(self, angles: np.ndarray, index: int) -> np.ndarray:
        """Model-root -> link frame of joint ``index`` (after its rotation)."""
        return self._transforms(angles)[index]

    def joint_model_transform(self, angles: np.ndarray, index: int) -> np.ndarray:
        """Model-root -> the frame in which joint ``index`` rotates (before its angle)."""
        j = self.joints[index]
        base = np.eye(4)
        base[:3, 3] = j.origin
        if j.parent < 0:
            return base
        return self._transforms(angles)[j.parent] @ base

    def to_dict(self) -> dict:
        return {
            "joints": [
                {"axis": j.axis.tolist(), "origin": j.origin.tolist(), "parent": j.parent}
                for j in self.joints
            ]
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KinematicChain":
        return cls(
            tuple(Joint(np.array(j["axis"]), np.array(j["origin"]), int(j["parent"])) for j in d["joints"])
        )


@dataclass(frozen=True)
class JointTrajectory:
    """Per-frame joint angles (radians, change relative to frame 1) and confidences."""

    angles: np.ndarray  # (n, d)
    confidence: np.ndarray  # (n, d) in [0, 1]

    def __post_init__(self):
        a = np.atleast_2d(np.asarray(self.angles, dtype=float))
        c = np.atleast_2d(np.asarray(self.confidence, dtype=float))
        if a.shape != c.shape:
            raise ValueError("angles and confidence must have matching shapes")
        if not np.isfinite(a).all():
            raise ValueError("trajectory angles must be finite")
        if (c < 0).any() or (c > 1).any():
            raise ValueError("confidence must lie in [0, 1]")
        object.__setattr__(self, "angles", a)
        object.__setattr__(self, "confidence", c)

    @property
    def n_frames(self) -> int:
        return self.angles.shape[0]

    @property
    def dof(self) -> int:
        return self.angles.shape[1]


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    a = np.asarray(a, dtype=float)
    out = np.mod(a + np.pi, 2.0 * np.pi) - np.pi
    out = np.where(out == -np.pi, np.pi, out)
    return out if out.ndim else float(out)


def to_model_frame(rc: RigidMotion, cam: FramePose, wm: FramePose) -> RigidMotion:
    """Express a camera-frame motion in the model frame by conjugation.

    ``cam`` must be camera->world and ``wm`` world->model.  For motions with
    unknown translation scale only the rotation is conjugated and the unit
    translation direction rotated (an origin shift would silently mix the
    unknown scale with frame offsets); metric motions are conjugated as full
    4x4 transforms.
    """
    if cam.from_frame != "camera" or cam.to_frame != "world":
        raise FrameTagError(f"cam must be camera->world, got {cam.from_frame}->{cam.to_frame}")
    if wm.from_frame != "world" or wm.to_frame != "model":
        raise FrameTagError(f"wm must be world->model, got {wm.from_frame}->{wm.to_frame}")
    x = wm.compose(cam)  # camera -> model
    if rc.scale_known:
        m = x.matrix() @ rc.matrix() @ x.inverse().matrix()
        return RigidMotion(m[:3, :3], m[:3, 3], scale_known=True)
    r = x.rotation @ rc.rotation @ x.rotation.T
    return RigidMotion(r, x.rotation @ rc.translation, scale_known=False)


class JointAngle(NamedTuple):
    angle: float
    misalignment: float  # |component of the rotation axis orthogonal to the joint axis|
    near_pi: bool


def joint_angle_from_rotation(rm: RigidMotion, axis: np.ndarray) -> JointAngle:
    """Signed rotation angle of ``rm`` about ``axis`` (right-hand rule).

    The rotation is converted to axis-angle; the returned angle is the
    magnitude signed by the dot product of the rotation axis with ``axis``.
    ``misalignment`` is the sine of the angle between the two axes and
    serves as a confidence diagnostic; tiny rotations return (0, 0).
    """
    axis = np.asarray(axis, dtype=float).reshape(3)
    if abs(np.linalg.norm(axis) - 1.0) > 1e-9:
        raise ValueError("axis must be unit-norm")
    rotvec = Rotation.from_matrix(rm.rotation).as_rotvec()
    phi = float(np.linalg.norm(rotvec))
    if phi < 1e-6:
        return JointAngle(0.0, 0.0, False)
    ahat = rotvec / phi
    s = float(ahat @ axis)
    angle = phi if s >= 0 else -phi
    if angle <= -np.pi:
        angle = np.pi
    misalignment = float(np.sqrt(max(0.0, 1.0 - s * s)))
    return JointAngle(float(angle), misalignment, phi > np.pi - 1e-3)


def accumulate(pairs, confidences=None) -> JointTrajectory:
    """Prefix-sum per-pair angle changes into a trajectory.

    Row 0 is zero: angles are changes relative to the first frame.  Each
    per-pair change is wrapped to (-pi, pi] first.  Confidence of a
    trajectory row is the running minimum of its pairs' confidences.
    """
    pairs = np.atleast_2d(np.asarray(pairs, dtype=float))
    n_pairs, d = pairs.shape
    angles = np.zeros((n_pairs + 1, d))
    angles[1:] = np.cumsum(wrap_angle(pairs), axis=0)
    conf = np.ones((n_pairs + 1, d))
    if confidences is not None:
        c = np.atleast_2d(np.asarray(confidences, dtype=float))
        if c.shape != pairs.shape:
            raise ValueError("confidences must match pairs shape")
        conf[1:] = np.minimum.accumulate(c, axis=0)
    return JointTrajectory(angles, conf)


def joint_world_lines(chain: KinematicChain, base_angles: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """World-frame (axis, origin) of every joint at a given configuration."""
    out = []
    for j in range(chain.dof):
        tj = chain.joint_model_transform(base_angles, j)
        out.append((tj[:3, :3] @ chain.joints[j].axis, tj[:3, 3]))
    return out


def motions_from_lines(
    chain: KinematicChain,
    lines: list[tuple[np.ndarray, np.ndarray]],
    wc: np.ndarray,
    cw: np.ndarray,
    deltas: np.ndarray,
) -> list[RigidMotion]:
    """Per-link camera-frame motions from precomputed joint lines.

    Hot-path variant of `chain_pair_motions` for iterative fits: the joint
    lines at the base configuration are constant across evaluations.
    """
    deltas = np.asarray(deltas, dtype=float).reshape(chain.dof)
    world: list[np.ndarray] = []
    out: list[RigidMotion] = []
    for j in range(chain.dof):
        axis_w, origin_w = lines[j]
        r = rotation_about_axis(axis_w, deltas[j])
        step = np.eye(4)
        step[:3, :3] = r
        step[:3, 3] = origin_w - r @ origin_w
        parent = chain.joints[j].parent
        m = step if parent < 0 else world[parent] @ step
        world.append(m)
        cam_m = wc @ m @ cw
        out.append(RigidMotion(cam_m[:3, :3], cam_m[:3, 3], scale_known=True))
    return out


def chain_pair_motions(
    chain: KinematicChain,
    cam: FramePose,
    base_angles: np.ndarray,
    deltas: np.ndarray,
) -> list[RigidMotion]:
    """Camera-frame motion of every link implied by per-joint angle changes.

    Link i's motion over a pair is the ordered product of rotations about
    its ancestor joints' axis lines (taken at the ``base_angles``
    configuration), conjugated into the camera frame.  These motions are
    fully metric: the chain geometry fixes every translation.
    """
    return motions_from_lines(
        chain,
        joint_world_lines(chain, base_angles),
        cam.inverse().matrix(),
        cam.matrix(),
        deltas,
    )


def relative_motion(parent: RigidMotion | None, child: RigidMotion) -> RigidMotion:
    """Motion of a child once its parent's motion is undone (parent^-1 o child).

    With metric translations this is the exact relative transform.  When
    either scale is unknown only the rotation composition is meaningful; the
    translation is then a placeholder direction and must not be used.
    """
    if parent is None:
        return child
    if parent.scale_known and child.scale_known:
        return parent.inverse().compose(child)
    r = parent.rotation.T @ child.rotation
    t = parent.rotation.T @ child.translation
    n = np.linalg.norm(t)
    t = t / n if n > 0 else np.array([0.0, 0.0, 1.0])
    return RigidMotion(r, t, scale_known=False)


def pair_joint_angles(
    motions: Sequence[RigidMotion | None],
    chain: KinematicChain,
    cam: FramePose,
    base_angles: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-joint angle changes from per-link camera-frame motions.

    ``motions[i]`` is the estimated camera-frame motion of link i over the
    pair (None if estimation failed).  Joints are processed base-to-tip:
    each link's motion is first made relative to its parent's, then
    conjugated into the joint's model frame (built by forward kinematics at
    the accumulated ``base_angles``), where the angle about the stored axis
    is read off.  Returns (deltas, misalignments); failed joints get delta 0
    and misalignment 1.
    """
    d = chain.dof
    deltas = np.zeros(d)
    misalign = np.ones(d)
    for i in range(d):
        if motions[i] is None:
            continue
        parent = chain.joints[i].parent
        parent_motion = motions[parent] if parent >= 0 else None
        if parent >= 0 and parent_motion is None:
            continue
        rel = relative_motion(parent_motion, motions[i])
        wm_mat = np.linalg.inv(chain.joint_model_transform(base_angles, i))
        wm = FramePose(wm_mat[:3, :3], wm_mat[:3, 3], "world", "model")
        m_model = to_model_frame(rel, cam, wm)
        ja = joint_angle_from_rotation(m_model, chain.joints[i].axis)
        deltas[i] = ja.angle
        misalign[i] = ja.misalignment
    return deltas, misalign

"""Two-view epipolar geometry for independently moving rigid parts.

All operations are pure functions of their arguments and are safe to call
concurrently.  Pixels are (x, y) with x along image columns; camera frames
follow the usual computer-vision convention (x right, y down, z forward),
and a motion maps frame-k camera coordinates to frame-(k+1):
``x' = R x + t``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CheiralityAmbiguousError,
    DegenerateConfigurationError,
    InsufficientDataError,
    InvalidIntrinsicsError,
    NoParallaxError,
)

_W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixel units."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidIntrinsicsError(f"focal lengths must be positive, got ({self.fx}, {self.fy})")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidIntrinsicsError("principal point must lie inside the image")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def inverse_matrix(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    def project(self, points: np.ndarray) -> np.ndarray:
        """Project (N, 3) camera-frame points to (N, 2) pixels. Callers check z > 0."""
        points = np.asarray(points, dtype=float)
        z = points[..., 2]
        return np.stack(
            [self.fx * points[..., 0] / z + self.cx, self.fy * points[..., 1] / z + self.cy],
            axis=-1,
        )

    def backproject_directions(self, pixels: np.ndarray) -> np.ndarray:
        """Unit-depth ray directions K^-1 [p; 1] for (N, 2) pixels."""
        pixels = np.asarray(pixels, dtype=float)
        x = (pixels[..., 0] - self.cx) / self.fx
        y = (pixels[..., 1] - self.cy) / self.fy
        return np.stack([x, y, np.ones_like(x)], axis=-1)


def skew(t) -> np.ndarray:
    """Cross-product matrix: skew(t) @ v == cross(t, v)."""
    t = np.asarray(t, dtype=float).reshape(3)
    return np.array(
        [
            [0.0, -t[2], t[1]],
            [t[2], 0.0, -t[0]],
            [-t[1], t[0], 0.0],
        ]
    )


@dataclass(frozen=True)
class RigidMotion:
    """Rotation + translation of one rigid body between two frames.

    When ``scale_known`` is False the translation is only a direction
    (monocular epipolar geometry is scale-blind) and is kept unit-norm.
    """

    rotation: np.ndarray
    translation: np.ndarray
    scale_known: bool = True

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-9:
            raise ValueError("rotation is not orthonormal within 1e-9")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValueError("rotation determinant must be +1 within 1e-9")
        if not self.scale_known and abs(np.linalg.norm(t) - 1.0) > 1e-12:
            raise ValueError("scale-free translation must be unit-norm within 1e-12")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidMotion":
        return cls(np.eye(3), np.zeros(3), scale_known=True)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def inverse(self) -> "RigidMotion":
        return RigidMotion(self.rotation.T, -self.rotation.T @ self.translation, self.scale_known)

    def compose(self, inner: "RigidMotion") -> "RigidMotion":
        """self after inner: (self.compose(inner)).apply(x) == self.apply(inner.apply(x)).

        Requires metric translations on both sides; composing unit-norm
        directions would silently mix unknown scales.
        """
        if not (self.scale_known and inner.scale_known):
            raise ValueError("cannot compose motions with unknown translation scale")
        return RigidMotion(
            self.rotation @ inner.rotation,
            self.rotation @ inner.translation + self.translation,
            scale_known=True,
        )

    def geodesic_angle_to(self, other: "RigidMotion") -> float:
        """Rotation angle (radians) between the two rotations."""
        c = (np.trace(self.rotation.T @ other.rotation) - 1.0) / 2.0
        return float(np.arccos(np.clip(c, -1.0, 1.0)))


@dataclass(frozen=True)
class EssentialMatrix:
    """3x3 essential matrix, defined up to scale."""

    e: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "e", np.asarray(self.e, dtype=float).reshape(3, 3))

    @classmethod
    def from_motion(cls, motion: RigidMotion) -> "EssentialMatrix":
        return cls(skew(motion.translation) @ motion.rotation)

    def projected(self) -> "EssentialMatrix":
        """Nearest matrix (Frobenius) with singular values (s, s, 0)."""
        u, s, vt = np.linalg.svd(self.e)
        mean = (s[0] + s[1]) / 2.0
        return EssentialMatrix(u @ np.diag([mean, mean, 0.0]) @ vt)


@dataclass(frozen=True)
class Correspondences:
    """Dense pixel correspondences: p in frame k paired with p' in frame k+1.

    Arrays are (N, 2).  ``shape`` optionally remembers the (H, W) grid the
    pixels came from, so segmentation can rebuild per-pixel label images.
    """

    p: np.ndarray
    p_prime: np.ndarray
    shape: tuple[int, int] | None = field(default=None)

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float).reshape(-1, 2)
        pp = np.asarray(self.p_prime, dtype=float).reshape(-1, 2)
        if p.shape != pp.shape:
            raise ValueError("p and p_prime must have matching shapes")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "p_prime", pp)

    def __len__(self) -> int:
        return self.p.shape[0]

    def subset(self, idx) -> "Correspondences":
        return Correspondences(self.p[idx], self.p_prime[idx], self.shape)

    def flow_magnitude(self) -> np.ndarray:
        return np.linalg.norm(self.p_prime - self.p, axis=1)

    def out_of_bounds(self, k: CameraIntrinsics) -> np.ndarray:
        """Flag correspondences whose endpoint leaves the image."""
        x, y = self.p_prime[:, 0], self.p_prime[:, 1]
        return (x < 0) | (x > k.width - 1) | (y < 0) | (y > k.height - 1)


def _pixel_fundamental(e: EssentialMatrix, k: CameraIntrinsics) -> np.ndarray:
    if k.fx == 0 or k.fy == 0:
        raise InvalidIntrinsicsError("singular intrinsics")
    kinv = k.inverse_matrix()
    return kinv.T @ e.e @ kinv


def _homogeneous(pixels: np.ndarray) -> np.ndarray:
    return np.concatenate([pixels, np.ones((pixels.shape[0], 1))], axis=1)


def epipolar_residual(cs: Correspondences, e: EssentialMatrix, k: CameraIntrinsics) -> np.ndarray:
    """|p'^T K^-T E K^-1 p| for every correspondence (nonnegative, scale of E)."""
    f = _pixel_fundamental(e, k)
    lines = _homogeneous(cs.p) @ f.T
    return np.abs(np.sum(_homogeneous(cs.p_prime) * lines, axis=1))


def epipolar_lines(cs: Correspondences, e: EssentialMatrix, k: CameraIntrinsics) -> np.ndarray:
    """Epipolar lines in the second image, (N, 3) coefficients of F p."""
    f = _pixel_fundamental(e, k)
    return _homogeneous(cs.p) @ f.T


def sampson_distance(cs: Correspondences, e: EssentialMatrix, k: CameraIntrinsics) -> np.ndarray:
    """First-order geometric error of the correspondence endpoint, in pixels.

    Equals the perpendicular distance from p' to the epipolar line of p
    (the residual is linear in p', so first order is exact there).  The
    distance is invariant to the scale of E, which is normalized internally
    so near-zero-motion matrices stay numerically meaningful.  Where the
    line gradient vanishes (p at the epipole) this falls back to the
    algebraic residual.
    """
    scale = np.linalg.norm(e.e)
    if scale > 0:
        e = EssentialMatrix(e.e * (np.sqrt(2.0) / scale))
    lines = epipolar_lines(cs, e, k)
    r = np.sum(_homogeneous(cs.p_prime) * lines, axis=1)
    grad = np.hypot(lines[:, 0], lines[:, 1])
    out = np.abs(r)
    ok = grad > 1e-12
    out[ok] = out[ok] / grad[ok]
    return out


def _hartley_normalization(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Isotropic normalization: zero centroid, RMS distance sqrt(2)."""
    centroid = points.mean(axis=0)
    rms = np.sqrt(np.mean(np.sum((points - centroid) ** 2, axis=1)))
    scale = np.sqrt(2.0) / max(rms, 1e-15)
    t = np.array(
        [
            [scale, 0.0, -scale * centroid[0]],
            [0.0, scale, -scale * centroid[1]],
            [0.0, 0.0, 1.0],
        ]
    )
    return (points - centroid) * scale, t


def estimate_essential_8pt(cs: Correspondences, k: CameraIntrinsics) -> EssentialMatrix:
    """Least-squares eight-point estimate, projected onto the essential manifold.

    Pixels are first mapped through K^-1, then Hartley-normalized for
    conditioning.  The result has unit singular-value scale and a
    deterministic sign (largest-|entry| positive), and is invariant to the
    ordering of the input correspondences.
    """
    if len(cs) < 8:
        raise InsufficientDataError(f"eight-point needs >= 8 correspondences, got {len(cs)}")
    # Canonical ordering makes the float accumulation order, and hence the
    # result, independent of how the caller ordered the matches.
    order = np.lexsort((cs.p_prime[:, 1], cs.p_prime[:, 0], cs.p[:, 1], cs.p[:, 0]))
    kinv = k.inverse_matrix()
    x = (_homogeneous(cs.p[order]) @ kinv.T)[:, :2]
    xp = (_homogeneous(cs.p_prime[order]) @ kinv.T)[:, :2]

    xn, t0 = _hartley_normalization(x)
    xpn, t1 = _hartley_normalization(xp)

    a = np.empty((len(cs), 9))
    a[:, 0] = xpn[:, 0] * xn[:, 0]
    a[:, 1] = xpn[:, 0] * xn[:, 1]
    a[:, 2] = xpn[:, 0]
    a[:, 3] = xpn[:, 1] * xn[:, 0]
    a[:, 4] = xpn[:, 1] * xn[:, 1]
    a[:, 5] = xpn[:, 1]
    a[:, 6] = xn[:, 0]
    a[:, 7] = xn[:, 1]
    a[:, 8] = 1.0

    # full_matrices only when the null vector is not part of the economy Vt
    _, s, vt = np.linalg.svd(a, full_matrices=len(cs) < 9)
    # A unique (up to scale) solution needs eight independent constraints.
    if s[7] <= 0 or s[0] / s[7] > 1e12:
        raise DegenerateConfigurationError("design matrix is rank-deficient (condition > 1e12)")
    e_norm = vt[-1].reshape(3, 3)
    e_cal = t1.T @ e_norm @ t0

    e = EssentialMatrix(e_cal).projected().e
    e = e * (np.sqrt(2.0) / np.linalg.norm(e))
    flat_idx = int(np.argmax(np.abs(e)))
    if e.flat[flat_idx] < 0:
        e = -e
    return EssentialMatrix(e)


def _triangulate_midpoint_many(
    cs: Correspondences, m: RigidMotion, k: CameraIntrinsics
) -> tuple[np.ndarray, np.ndarray]:
    """Midpoint triangulation of every correspondence.

    Returns (points (N, 3) in frame-k camera coordinates, ok mask); points
    where the rays are near-parallel are left as NaN with ok False.
    """
    d0 = k.backproject_directions(cs.p)
    d0 = d0 / np.linalg.norm(d0, axis=1, keepdims=True)
    d1 = k.backproject_directions(cs.p_prime) @ m.rotation  # R^T applied row-wise
    d1 = d1 / np.linalg.norm(d1, axis=1, keepdims=True)
    o1 = -m.rotation.T @ m.translation  # second camera center in frame-k coords

    b = np.sum(d0 * d1, axis=1)
    w = -o1  # o0 - o1 with o0 = 0
    d = np.sum(d0 * w, axis=1)
    e = np.sum(d1 * w, axis=1)
    denom = 1.0 - b * b
    ok = denom > 1e-12  # sin^2 of the ray angle; excludes angles <= ~1e-6 rad
    s0 = np.where(ok, (b * e - d) / np.where(ok, denom, 1.0), np.nan)
    s1 = np.where(ok, (e - b * d) / np.where(ok, denom, 1.0), np.nan)
    points = (s0[:, None] * d0 + o1 + s1[:, None] * d1) / 2.0
    return points, ok


def triangulate_midpoint(cs: Correspondences, m: RigidMotion, k: CameraIntrinsics) -> np.ndarray:
    """Midpoint of the common perpendicular between the two viewing rays.

    Returns (N, 3) points in frame-k camera coordinates; raises
    NoParallaxError if any ray pair is closer than ~1e-6 rad to parallel.
    """
    points, ok = _triangulate_midpoint_many(cs, m, k)
    if not ok.all():
        raise NoParallaxError(f"{int((~ok).sum())} correspondence(s) have (near-)parallel rays")
    return points


def _essential_candidates(e: EssentialMatrix) -> list[tuple[np.ndarray, np.ndarray]]:
    u, _, vt = np.linalg.svd(e.e)
    if np.linalg.det(u) < 0:
        u = u.copy()
        u[:, -1] *= -1
    if np.linalg.det(vt) < 0:
        vt = vt.copy()
        vt[-1, :] *= -1
    r1 = u @ _W @ vt
    r2 = u @ _W.T @ vt
    t = u[:, 2]
    return [(r1, t), (r1, -t), (r2, t), (r2, -t)]


def decompose_essential(
    e: EssentialMatrix, cs: Correspondences, k: CameraIntrinsics
) -> RigidMotion:
    """Recover (R, unit t) from E, picking the candidate that passes cheirality.

    Of the four SVD candidates, returns the one maximizing the number of
    correspondences whose midpoint-triangulated point has positive depth in
    both frames.  The winner must gather votes from more than half the
    correspondences, otherwise the configuration is ambiguous.
    """
    if len(cs) == 0:
        raise InsufficientDataError("cheirality test needs at least one correspondence")
    best_votes = -1
    best: RigidMotion | None = None
    for r, t in _essential_candidates(e):
        motion = RigidMotion(r, t / np.linalg.norm(t), scale_known=False)
        points, ok = _triangulate_midpoint_many(cs, motion, k)
        z0 = points[:, 2]
        z1 = points @ motion.rotation[2] + motion.translation[2]
        votes = int(np.count_nonzero(ok & (z0 > 0) & (z1 > 0)))
        if votes > best_votes:
            best_votes = votes
            best = motion
    if best is None or best_votes <= len(cs) // 2:
        raise CheiralityAmbiguousError(
            f"best candidate explains only {best_votes}/{len(cs)} correspondences"
        )
    return best

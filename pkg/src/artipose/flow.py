"""Dense correspondences: flow/depth containers, bit-exact file I/O,
photometric loss, and variational flow refinement under the combined
epipolar + photometric objective.

Flow and depth rasters are float32 (the native precision of the on-disk
formats), so file round-trips are bit-identical.  The .flo layout is the
Middlebury one: little-endian float32 sentinel 202021.25, int32 width,
int32 height, then row-major interleaved (u, v) float32 pairs.  The format
carries no validity mask; invalid pixels follow the usual convention of
storing a magnitude above 1e9.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .errors import EmptyRegionError, FlowFormatError, MonotonicityError, PayloadLengthError
from .geometry import CameraIntrinsics, Correspondences, EssentialMatrix, RigidMotion, epipolar_lines

FLO_SENTINEL = 202021.25
FLO_INVALID = 1e10
_FLO_INVALID_LIMIT = 1e9


@dataclass(frozen=True)
class Image:
    """H x W x 3 intensities in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=float)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError("image must be H x W x 3")
        if px.min() < -1e-9 or px.max() > 1.0 + 1e-9:
            raise ValueError("intensities must lie in [0, 1]")
        object.__setattr__(self, "pixels", np.clip(px, 0.0, 1.0))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class FlowField:
    """Per-pixel displacement from frame k to k+1, with a validity mask."""

    u: np.ndarray
    v: np.ndarray
    valid: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        u = np.asarray(self.u, dtype=np.float32)
        v = np.asarray(self.v, dtype=np.float32)
        if u.shape != v.shape or u.ndim != 2:
            raise ValueError("u and v must be matching 2-D arrays")
        valid = self.valid
        valid = np.ones(u.shape, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
        if valid.shape != u.shape:
            raise ValueError("valid mask must match flow shape")
        valid = valid & np.isfinite(u) & np.isfinite(v)
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "valid", valid)

    @property
    def shape(self) -> tuple[int, int]:
        return self.u.shape


@dataclass(frozen=True)
class DepthMap:
    """Metric depth raster; entries must be strictly positive to be valid."""

    d: np.ndarray
    valid: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        d = np.asarray(self.d, dtype=np.float32)
        if d.ndim != 2:
            raise ValueError("depth must be a 2-D array")
        valid = self.valid
        valid = np.ones(d.shape, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
        if valid.shape != d.shape:
            raise ValueError("valid mask must match depth shape")
        valid = valid & np.isfinite(d) & (d > 0)
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "valid", valid)

    @property
    def shape(self) -> tuple[int, int]:
        return self.d.shape


def write_flo(f: FlowField, path) -> None:
    """Write Middlebury .flo. u/v are stored exactly as held (float32)."""
    h, w = f.shape
    data = np.empty((h, w, 2), dtype="<f4")
    data[:, :, 0] = f.u
    data[:, :, 1] = f.v
    with open(path, "wb") as fh:
        fh.write(struct.pack("<f", FLO_SENTINEL))
        fh.write(struct.pack("<ii", w, h))
        fh.write(data.tobytes())


def read_flo(path) -> FlowField:
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise PayloadLengthError(f"{path}: too short for a .flo header")
    (sentinel,) = struct.unpack("<f", raw[:4])
    if sentinel != np.float32(FLO_SENTINEL):
        raise FlowFormatError(f"{path}: bad sentinel {sentinel!r}")
    w, h = struct.unpack("<ii", raw[4:12])
    expected = 12 + 8 * w * h
    if len(raw) != expected:
        raise PayloadLengthError(f"{path}: expected {expected} bytes, got {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", offset=12).reshape(h, w, 2)
    u, v = data[:, :, 0], data[:, :, 1]
    valid = (np.abs(u) < _FLO_INVALID_LIMIT) & (np.abs(v) < _FLO_INVALID_LIMIT)
    return FlowField(u.copy(), v.copy(), valid)


def write_depth(dm: DepthMap, path, units: str = "scene_units") -> None:
    """Raw little-endian float32 raster plus a JSON sidecar at <path>.json."""
    h, w = dm.shape
    Path(path).write_bytes(dm.d.astype("<f4").tobytes())
    sidecar = {"width": w, "height": h, "units": units}
    Path(str(path) + ".json").write_text(json.dumps(sidecar, sort_keys=True))


def read_depth(path) -> DepthMap:
    sidecar_path = Path(str(path) + ".json")
    if not sidecar_path.exists():
        raise PayloadLengthError(f"{path}: missing sidecar {sidecar_path}")
    sidecar = json.loads(sidecar_path.read_text())
    w, h = int(sidecar["width"]), int(sidecar["height"])
    raw = Path(path).read_bytes()
    if len(raw) != 4 * w * h:
        raise PayloadLengthError(f"{path}: expected {4 * w * h} bytes, got {len(raw)}")
    d = np.frombuffer(raw, dtype="<f4").reshape(h, w).copy()
    return DepthMap(d)


def read_image(path) -> Image:
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=float) / 255.0
    return Image(arr)


def write_image(img: Image, path) -> None:
    arr = np.clip(np.rint(img.pixels * 255.0), 0, 255).astype(np.uint8)
    PILImage.fromarray(arr, mode="RGB").save(path)


def sample_bilinear(pixels: np.ndarray, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear samples of an (H, W[, C]) array at (N, 2) sub-pixel (x, y).

    Out-of-bounds queries clamp to the border; the second return value flags
    them.
    """
    pixels = np.asarray(pixels)
    h, w = pixels.shape[:2]
    q = np.asarray(q, dtype=float).reshape(-1, 2)
    oob = (q[:, 0] < 0) | (q[:, 0] > w - 1) | (q[:, 1] < 0) | (q[:, 1] > h - 1)
    x = np.clip(q[:, 0], 0.0, w - 1.0)
    y = np.clip(q[:, 1], 0.0, h - 1.0)
    x0 = np.minimum(np.floor(x).astype(int), w - 2) if w > 1 else np.zeros(len(x), dtype=int)
    y0 = np.minimum(np.floor(y).astype(int), h - 2) if h > 1 else np.zeros(len(y), dtype=int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0
    if pixels.ndim == 3:
        fx = fx[:, None]
        fy = fy[:, None]
    v00 = pixels[y0, x0]
    v01 = pixels[y0, x1]
    v10 = pixels[y1, x0]
    v11 = pixels[y1, x1]
    top = v00 * (1 - fx) + v01 * fx
    bot = v10 * (1 - fx) + v11 * fx
    return top * (1 - fy) + bot * fy, oob


def correspondences_from_flow(f: FlowField) -> Correspondences:
    """One correspondence per valid flow pixel: (p, p + F(p))."""
    ys, xs = np.nonzero(f.valid)
    p = np.stack([xs, ys], axis=1).astype(float)
    pp = p + np.stack([f.u[ys, xs], f.v[ys, xs]], axis=1)
    return Correspondences(p, pp, shape=f.shape)


def photometric_loss(i0: Image, i1: Image, f: FlowField, region: np.ndarray | None = None) -> float:
    """Mean over the region of ||I_k(p) - I_{k+1}(p + F(p))|| (L2 over channels)."""
    if (i0.height, i0.width) != f.shape or (i1.height, i1.width) != f.shape:
        raise ValueError("images and flow must share dimensions")
    mask = f.valid if region is None else (np.asarray(region, dtype=bool) & f.valid)
    if not mask.any():
        raise EmptyRegionError("no valid pixels in the requested region")
    ys, xs = np.nonzero(mask)
    q = np.stack([xs + f.u[ys, xs], ys + f.v[ys, xs]], axis=1)
    warped, _ = sample_bilinear(i1.pixels, q)
    diff = i0.pixels[ys, xs] - warped
    return float(np.mean(np.linalg.norm(diff, axis=1)))


@dataclass(frozen=True)
class RefineFlowConfig:
    lambda_epipolar: float = 1.0
    lambda_photometric: float = 1.0
    epipolar_cap_px: float = 3.0  # epipolar term saturates here (robust truncation)
    step_px: float = 0.1
    iterations: int = 50
    grad_step_px: float = 0.5
    max_backtracks: int = 4


def _photometric_sq(i0_vals: np.ndarray, i1_pixels: np.ndarray, q: np.ndarray) -> np.ndarray:
    warped, _ = sample_bilinear(i1_pixels, q)
    return np.sum((i0_vals - warped) ** 2, axis=1)


def refine_flow(
    i0: Image,
    i1: Image,
    f: FlowField,
    labels,
    motions,
    k: CameraIntrinsics,
    cfg: RefineFlowConfig = RefineFlowConfig(),
    essentials=None,
) -> FlowField:
    """Per-pixel descent on lambda_e * sampson^2 + lambda_p * photometric^2.

    Each labeled pixel's endpoint is moved against the gradient of its own
    objective (epipolar term analytic, photometric term by central
    differences of bilinear samples); steps that do not lower the pixel's
    objective are halved and finally rejected, so the total objective never
    increases.  Background/invalid pixels pass through untouched.  When the
    caller has least-squares essential matrices for the parts (``essentials``)
    they are used for the epipolar term instead of rebuilding skew(t) R from
    the decomposed motions, which is much less accurate at small baselines.
    """
    lab = labels.labels
    if lab.shape != f.shape:
        raise ValueError("labels must match flow shape")
    if len(motions) < labels.d:
        raise ValueError("every nonbackground label needs a motion")
    active = (lab > 0) & f.valid
    if not active.any():
        return FlowField(f.u.copy(), f.v.copy(), f.valid.copy())

    ys, xs = np.nonzero(active)
    p = np.stack([xs, ys], axis=1).astype(float)
    endpoint = p + np.stack([f.u[ys, xs], f.v[ys, xs]], axis=1).astype(float)
    px_labels = lab[ys, xs]

    # Epipolar line of each pixel under its part's motion; constant per call.
    # Parts without a usable model keep zero lines, i.e. no epipolar pull.
    lines = np.zeros((len(p), 3))
    for part in range(1, labels.d + 1):
        sel = px_labels == part
        if not sel.any():
            continue
        if essentials is not None:
            e = essentials[part - 1]
            if e is None:
                continue
        else:
            if motions[part - 1] is None:
                continue
            e = EssentialMatrix.from_motion(motions[part - 1])
        cs = Correspondences(p[sel], p[sel])
        lines[sel] = epipolar_lines(cs, e, k)
    line_sq = lines[:, 0] ** 2 + lines[:, 1] ** 2
    safe_sq = np.maximum(line_sq, 1e-30)

    i0_vals = i0.pixels[ys, xs]
    le, lp = cfg.lambda_epipolar, cfg.lambda_photometric
    cap_sq = cfg.epipolar_cap_px**2
    h = cfg.grad_step_px
    ex = np.array([h, 0.0])
    ey = np.array([0.0, h])

    def objective(pts: np.ndarray, sel=slice(None)) -> np.ndarray:
        r = lines[sel, 0] * pts[:, 0] + lines[sel, 1] * pts[:, 1] + lines[sel, 2]
        epi = np.minimum(r * r / safe_sq[sel], cap_sq)
        return le * epi + lp * _photometric_sq(i0_vals[sel], i1.pixels, pts)

    obj = objective(endpoint)
    total = float(obj.sum())
    n_active = len(p)
    i0_tiled = np.tile(i0_vals, (4, 1))
    for _ in range(cfg.iterations):
        r = lines[:, 0] * endpoint[:, 0] + lines[:, 1] * endpoint[:, 1] + lines[:, 2]
        g_epi = (2.0 * r / safe_sq)[:, None] * lines[:, :2]
        g_epi[r * r / safe_sq >= cap_sq] = 0.0  # saturated pixels feel no epipolar pull
        stencil = np.concatenate(
            [endpoint + ex, endpoint - ex, endpoint + ey, endpoint - ey], axis=0
        )
        photo = _photometric_sq(i0_tiled, i1.pixels, stencil)
        gpx = (photo[:n_active] - photo[n_active : 2 * n_active]) / (2 * h)
        gpy = (photo[2 * n_active : 3 * n_active] - photo[3 * n_active :]) / (2 * h)
        g = le * g_epi + lp * np.stack([gpx, gpy], axis=1)
        gnorm = np.linalg.norm(g, axis=1)
        movable = gnorm > 1e-15
        if not movable.any():
            break
        direction = np.zeros_like(g)
        direction[movable] = g[movable] / gnorm[movable, None]

        accepted = np.zeros(len(p), dtype=bool)
        step = cfg.step_px
        pending = movable.copy()
        for _bt in range(cfg.max_backtracks + 1):
            if not pending.any():
                break
            cand = endpoint[pending] - step * direction[pending]
            cand_obj = objective(cand, pending)
            better = cand_obj < obj[pending] - 1e-15
            idx = np.nonzero(pending)[0][better]
            endpoint[idx] = cand[better]
            obj[idx] = cand_obj[better]
            accepted[idx] = True
            pending[idx] = False
            step *= 0.5
        new_total = float(obj.sum())
        if new_total > total + 1e-9:
            raise MonotonicityError("flow refinement objective increased")
        total = new_total
        if not accepted.any():
            break

    u = f.u.astype(np.float64).copy()
    v = f.v.astype(np.float64).copy()
    u[ys, xs] = endpoint[:, 0] - p[:, 0]
    v[ys, xs] = endpoint[:, 1] - p[:, 1]
    return FlowField(u.astype(np.float32), v.astype(np.float32), f.valid.copy())


def combined_flow_objective(
    i0: Image,
    i1: Image,
    f: FlowField,
    labels,
    motions,
    k: CameraIntrinsics,
    cfg: RefineFlowConfig = RefineFlowConfig(),
) -> float:
    """Total refinement objective of a flow field (sum over labeled pixels)."""
    lab = labels.labels
    active = (lab > 0) & f.valid
    if not active.any():
        return 0.0
    ys, xs = np.nonzero(active)
    p = np.stack([xs, ys], axis=1).astype(float)
    endpoint = p + np.stack([f.u[ys, xs], f.v[ys, xs]], axis=1).astype(float)
    px_labels = lab[ys, xs]
    total = 0.0
    for part in range(1, labels.d + 1):
        sel = px_labels == part
        if not sel.any():
            continue
        e = EssentialMatrix.from_motion(motions[part - 1])
        cs = Correspondences(p[sel], endpoint[sel])
        lines = epipolar_lines(cs, e, k)
        r = np.sum(lines * np.concatenate([endpoint[sel], np.ones((sel.sum(), 1))], axis=1), axis=1)
        sq = np.maximum(lines[:, 0] ** 2 + lines[:, 1] ** 2, 1e-30)
        epi = float(np.sum(np.minimum(r * r / sq, cfg.epipolar_cap_px**2)))
        warped, _ = sample_bilinear(i1.pixels, endpoint[sel])
        photo = float(np.sum((i0.pixels[ys, xs][sel] - warped) ** 2))
        total += cfg.lambda_epipolar * epi + cfg.lambda_photometric * photo
    return total

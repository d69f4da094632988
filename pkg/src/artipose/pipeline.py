"""End-to-end trajectory estimation: configuration, the per-pair loop,
association of discovered parts to chain joints, accumulation, final
bundle adjustment, evaluation, and result emission.

A run is fully determined by its configuration (including the seed): the
emitted result document is byte-identical across repeated runs.  Wall time
is reported separately and never enters the result document.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from itertools import permutations
from pathlib import Path

import numpy as np

from . import ba as ba_mod
from .errors import ArtiposeError, ConfigError, NoOverlapError
from .flow import (
    FlowField,
    Image,
    RefineFlowConfig,
    correspondences_from_flow,
    read_depth,
    read_flo,
    read_image,
    refine_flow,
)
from .geometry import (
    CameraIntrinsics,
    Correspondences,
    EssentialMatrix,
    RigidMotion,
    sampson_distance,
    skew,
)
from .kinematics import (
    FramePose,
    JointTrajectory,
    KinematicChain,
    accumulate,
    chain_pair_motions,
    joint_world_lines,
    motions_from_lines,
    pair_joint_angles,
)
from .segmentation import PartLabeling, SegmentationConfig, SegmentationResult, em_refine, ransac_init
from .simulator import (
    MANIFEST_NAME,
    NoiseSpec,
    make_scene,
    perturb,
    render_sequence,
    scene_manifest,
    write_scene,
)

RESULT_FORMAT = "artipose-result-v1"


@dataclass(frozen=True)
class BaConfig:
    inlier_px: float = 3.0
    gn_iterations: int = 50
    max_points_per_part: int = 1200
    cloud_points_per_part: int = 600
    final_max_points: int = 6000
    final: ba_mod.FinalBaConfig = field(default_factory=ba_mod.FinalBaConfig)


@dataclass(frozen=True)
class JointFitConfig:
    """Chain-constrained per-pair angle fit (epipolar-only, no depth needed)."""

    enabled: bool = True
    cap_px: float = 3.0  # robust truncation of the endpoint epipolar distance
    max_points_per_part: int = 1500
    max_evaluations: int = 400
    xtol_rad: float = 1e-7


def fit_pair_deltas(
    cs_parts: list[Correspondences],
    k: CameraIntrinsics,
    chain: KinematicChain,
    cam_pose: FramePose,
    base_angles: np.ndarray,
    delta0: np.ndarray,
    cfg: JointFitConfig = JointFitConfig(),
) -> tuple[np.ndarray, float]:
    """Estimate all per-pair joint changes jointly from dense correspondences.

    The chain fixes every link's camera-frame motion as a function of the d
    joint deltas (`chain_pair_motions`), so the per-pair problem is a
    d-dimensional robust fit: minimize the truncated squared endpoint
    epipolar distance summed over every part's member pixels.  Because a
    joint's delta is constrained by all descendant links' pixels, this is
    far better conditioned at small motions than decomposing each part's
    essential matrix independently.  Returns (deltas, objective).
    """
    from scipy.optimize import minimize

    cap_sq = cfg.cap_px**2
    d = chain.dof
    lines = joint_world_lines(chain, base_angles)
    wc = cam_pose.inverse().matrix()
    cw = cam_pose.matrix()

    def objective(deltas: np.ndarray) -> float:
        motions = motions_from_lines(chain, lines, wc, cw, deltas)
        total, n = 0.0, 0
        for j in range(d):
            cs = cs_parts[j]
            if cs is None or len(cs) == 0:
                continue
            t = motions[j].translation
            if np.linalg.norm(t) < 1e-12:
                total += cap_sq * len(cs)
                n += len(cs)
                continue
            e = EssentialMatrix(skew(t) @ motions[j].rotation)
            dist = sampson_distance(cs, e, k)
            total += float(np.minimum(dist * dist, cap_sq).sum())
            n += len(cs)
        return total / max(n, 1)

    # Multi-start keeps one bad initialization (a RANSAC hypothesis the EM
    # could not repair) from sticking in a poor local minimum; alternates are
    # skipped once a start reaches a clearly-converged objective.
    starts = [np.asarray(delta0, dtype=float).reshape(d), np.full(d, 0.3), np.full(d, -0.3)]
    best_x, best_f = starts[0], np.inf
    for x0 in starts:
        res = minimize(
            objective,
            x0,
            method="Powell",
            options=dict(xtol=cfg.xtol_rad, ftol=1e-10, maxfev=cfg.max_evaluations),
        )
        if res.fun < best_f:
            best_x, best_f = np.asarray(res.x, dtype=float).reshape(d), float(res.fun)
        if best_f < 0.1:  # mean px^2: already at a near-exact fit
            break
    return best_x, best_f


def fit_pair_deltas_reprojection(
    clouds,
    flow_targets,
    k: CameraIntrinsics,
    chain: KinematicChain,
    cam_pose: FramePose,
    base_angles: np.ndarray,
    delta0: np.ndarray,
    cap_px: float = 3.0,
    cfg: JointFitConfig = JointFitConfig(),
) -> tuple[np.ndarray, float]:
    """Depth-aware counterpart of `fit_pair_deltas`.

    Minimizes the truncated squared reprojection residual
    ||(p + F(p)) - proj(K T_j(deltas) X)|| of each joint's back-projected
    points over the d joint deltas.  ``clouds[j]`` holds joint j's 3-D
    points; ``flow_targets[j]`` the matching (N, 2) flow endpoints.
    """
    from scipy.optimize import minimize

    cap_sq = cap_px**2
    d = chain.dof
    lines = joint_world_lines(chain, base_angles)
    wc = cam_pose.inverse().matrix()
    cw = cam_pose.matrix()

    def objective(deltas: np.ndarray) -> float:
        motions = motions_from_lines(chain, lines, wc, cw, deltas)
        total, n = 0.0, 0
        for j in range(d):
            if clouds[j] is None or len(clouds[j]) == 0:
                continue
            moved = clouds[j] @ motions[j].rotation.T + motions[j].translation
            z = np.maximum(moved[:, 2], 1e-9)
            proj = np.stack([k.fx * moved[:, 0] / z + k.cx, k.fy * moved[:, 1] / z + k.cy], axis=1)
            res = np.sum((flow_targets[j] - proj) ** 2, axis=1)
            res[moved[:, 2] <= 1e-9] = cap_sq
            total += float(np.minimum(res, cap_sq).sum())
            n += len(res)
        return total / max(n, 1)

    res = minimize(
        objective,
        np.asarray(delta0, dtype=float),
        method="Powell",
        options=dict(xtol=cfg.xtol_rad, ftol=1e-12, maxfev=cfg.max_evaluations),
    )
    return np.asarray(res.x, dtype=float).reshape(d), float(res.fun)


@dataclass(frozen=True)
class PipelineConfig:
    """Everything a run needs; every default is echoed into the result."""

    input_dir: str | None = None
    preset: str | None = None
    seed: int = 0
    frames: int = 15
    width: int = 128
    height: int = 96
    flow_noise_px: float = 0.0
    depth_noise: float = 0.0
    use_depth: bool | None = None  # None = use depth when available
    refine_rounds: int = 10
    threshold_deg: float = 5.0
    out_dir: str | None = None
    emit_masks: bool = False
    emit_ply: bool = False
    emit_csv: bool = False
    segmentation: SegmentationConfig = field(default_factory=SegmentationConfig)
    refinement: RefineFlowConfig = field(default_factory=RefineFlowConfig)
    ba: BaConfig = field(default_factory=BaConfig)
    joint_fit: JointFitConfig = field(default_factory=JointFitConfig)

    def __post_init__(self):
        if (self.input_dir is None) == (self.preset is None):
            raise ConfigError("exactly one of input_dir / preset must be set")
        if self.frames < 2:
            raise ConfigError("need at least two frames")
        if self.refine_rounds < 0:
            raise ConfigError("refine_rounds must be >= 0")
        if self.seed < 0:
            raise ConfigError("seed must be nonnegative")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        try:
            for key, sub_cls in (
                ("segmentation", SegmentationConfig),
                ("refinement", RefineFlowConfig),
                ("ba", BaConfig),
                ("joint_fit", JointFitConfig),
            ):
                if key in d and isinstance(d[key], dict):
                    sub = dict(d[key])
                    if key == "ba" and isinstance(sub.get("final"), dict):
                        sub["final"] = ba_mod.FinalBaConfig(**sub["final"])
                    d[key] = sub_cls(**sub)
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad configuration: {exc}") from exc


@dataclass(frozen=True)
class EvaluationReport:
    mean_error_deg: float
    std_error_deg: float
    per_joint_mean_deg: tuple[float, ...]
    per_joint_std_deg: tuple[float, ...]
    pcp: float
    threshold_deg: float
    n_frames: int
    dof: int
    wall_time_s: float = 0.0

    def to_dict(self, include_wall_time: bool = False) -> dict:
        d = {
            "mean_error_deg": self.mean_error_deg,
            "std_error_deg": self.std_error_deg,
            "per_joint_mean_deg": list(self.per_joint_mean_deg),
            "per_joint_std_deg": list(self.per_joint_std_deg),
            "pcp": self.pcp,
            "threshold_deg": self.threshold_deg,
            "n_frames": self.n_frames,
            "dof": self.dof,
        }
        if include_wall_time:
            d["wall_time_s"] = self.wall_time_s
        return d


def evaluate(
    traj: JointTrajectory, gt: JointTrajectory, threshold_deg: float = 5.0, wall_time_s: float = 0.0
) -> EvaluationReport:
    """Per-joint absolute angular errors (degrees) and PCP at the threshold."""
    if traj.angles.shape != gt.angles.shape:
        raise ValueError("trajectories must have matching shapes")
    err = np.degrees(np.abs(traj.angles - gt.angles))
    return EvaluationReport(
        mean_error_deg=float(err.mean()),
        std_error_deg=float(err.std()),
        per_joint_mean_deg=tuple(float(x) for x in err.mean(axis=0)),
        per_joint_std_deg=tuple(float(x) for x in err.std(axis=0)),
        pcp=float((err < threshold_deg).mean()),
        threshold_deg=threshold_deg,
        n_frames=traj.n_frames,
        dof=traj.dof,
        wall_time_s=wall_time_s,
    )


@dataclass
class InputBundle:
    images: list[Image]
    flows: list[FlowField]
    depths: list | None
    camera: CameraIntrinsics
    cam_pose: FramePose
    chain: KinematicChain
    gt_schedule: np.ndarray | None
    manifest: dict


def _load_input_dir(path: str) -> InputBundle:
    root = Path(path)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.exists():
        raise ConfigError(f"{root}: no {MANIFEST_NAME} found")
    man = json.loads(manifest_path.read_text())
    n = int(man["frames"])
    cam = CameraIntrinsics(**man["camera"])
    cp = man["camera_pose"]
    cam_pose = FramePose(np.array(cp["rotation"]), np.array(cp["translation"]), "camera", "world")
    chain = KinematicChain.from_dict(man["chain"])
    files = man["files"]
    images = [read_image(root / (files["image"] % i)) for i in range(n)]
    flows = [read_flo(root / (files["flow"] % i)) for i in range(n - 1)]
    depths = None
    if all((root / (files["depth"] % i)).exists() for i in range(n)):
        depths = [read_depth(root / (files["depth"] % i)) for i in range(n)]
    sched = np.array(man["schedule_rad"]) if "schedule_rad" in man else None
    return InputBundle(images, flows, depths, cam, cam_pose, chain, sched, man)


def _simulate_inputs(cfg: PipelineConfig) -> InputBundle:
    scene = make_scene(cfg.preset, seed=cfg.seed, frames=cfg.frames, width=cfg.width, height=cfg.height)
    rendered = render_sequence(scene)
    if cfg.flow_noise_px > 0 or cfg.depth_noise > 0:
        rendered = [
            perturb(
                fr,
                NoiseSpec(
                    flow_sigma_px=cfg.flow_noise_px,
                    depth_sigma=cfg.depth_noise,
                    seed=cfg.seed * 1009 + 7919 * i,
                ),
            )
            for i, fr in enumerate(rendered)
        ]
    return InputBundle(
        images=[fr.image for fr in rendered],
        flows=[fr.flow for fr in rendered[:-1]],
        depths=[fr.depth for fr in rendered],
        camera=scene.camera,
        cam_pose=scene.cam_pose,
        chain=scene.chain,
        gt_schedule=scene.schedule.copy(),
        manifest=scene_manifest(scene),
    )


def _overlap_permutation(prev: np.ndarray, cur: np.ndarray, d: int) -> tuple[int, ...]:
    """Permutation mapping current labels -> joint slots by mask overlap."""
    overlap = np.zeros((d, d))
    for i in range(1, d + 1):
        cur_i = cur == i
        for j in range(1, d + 1):
            overlap[i - 1, j - 1] = np.count_nonzero(cur_i & (prev == j))
    best, best_score = tuple(range(d)), -1.0
    for perm in permutations(range(d)):
        score = sum(overlap[i, perm[i]] for i in range(d))
        if score > best_score:
            best_score = score
            best = perm
    return best  # current label i+1 plays joint perm[i]+1


def _association_permutation(
    motions: list[RigidMotion],
    chain: KinematicChain,
    cam_pose: FramePose,
    base_angles: np.ndarray,
) -> tuple[int, ...]:
    """Assign discovered parts to chain joints on the first pair.

    For every permutation, joint deltas are extracted base-to-tip and used
    to predict each link's camera-frame motion from the chain; the
    permutation whose measured translation directions and rotation axes
    best match the prediction wins.  This disambiguates joints whose axes
    are parallel (the rotation alone cannot).
    """
    d = chain.dof
    wc = cam_pose.inverse().matrix()
    best, best_score = tuple(range(d)), np.inf
    for perm in permutations(range(d)):
        # perm[cur] = joint slot for discovered label cur+1 (same convention
        # as _relabel); joint j is therefore played by motions[inv[j]].
        inv = [0] * d
        for cur, j in enumerate(perm):
            inv[j] = cur
        ordered = [motions[inv[j]] for j in range(d)]
        deltas, misalign = pair_joint_angles(ordered, chain, cam_pose, base_angles)
        score = float(misalign.sum())
        theta1 = base_angles + deltas
        for j in range(d):
            t0 = wc @ chain.link_transform(base_angles, j)
            t1 = wc @ chain.link_transform(theta1, j)
            pred = t1 @ np.linalg.inv(t0)
            pred_t = pred[:3, 3]
            norm = np.linalg.norm(pred_t)
            meas_t = ordered[j].translation
            meas_norm = np.linalg.norm(meas_t)
            if norm > 1e-12 and meas_norm > 1e-12:
                score += float(1.0 - (pred_t / norm) @ (meas_t / meas_norm))
            else:
                score += 1.0
        if score < best_score:
            best_score = score
            best = perm
    return best


def _relabel(seg: SegmentationResult, perm: tuple[int, ...], d: int) -> SegmentationResult:
    """Apply a current-label -> joint permutation to a segmentation result."""
    mapping = np.zeros(d + 1, dtype=np.int32)
    for cur_label in range(1, d + 1):
        mapping[cur_label] = perm[cur_label - 1] + 1
    new_labels = mapping[seg.labeling.labels]
    motions = [None] * d
    frozen = [False] * d
    essentials = [None] * d
    for cur in range(d):
        motions[perm[cur]] = seg.motions[cur]
        frozen[perm[cur]] = seg.frozen[cur]
        essentials[perm[cur]] = seg.essentials[cur]
    return SegmentationResult(
        PartLabeling(new_labels, d),
        tuple(motions),
        tuple(frozen),
        tuple(essentials),
        seg.iterations,
        seg.objective,
    )


def _grow_depth_support(
    depth, flow, image, camera, chain, cam_pose, base_angles, deltas, cfg, rng,
    max_candidates: int = 20000, max_per_joint: int = 2000,
):
    """Assign valid-depth pixels to joints by reprojection-residual gating.

    Returns per-joint (points, flow targets) including pixels whose flow
    magnitude is below the segmentation's static threshold; ambiguous pixels
    go to the joint with the smallest residual, pixels matching no joint
    within the inlier threshold are dropped.
    """
    d = chain.dof
    usable = depth.valid & flow.valid
    ys, xs = np.nonzero(usable)
    if ys.size == 0:
        return [None] * d, [None] * d
    if ys.size > max_candidates:
        keep = rng.choice(ys.size, size=max_candidates, replace=False)
        ys, xs = ys[keep], xs[keep]
    pix = np.stack([xs, ys], axis=1).astype(float)
    rays = camera.backproject_directions(pix)
    pts = rays * depth.d[ys, xs][:, None]
    targets = pix + np.stack([flow.u[ys, xs], flow.v[ys, xs]], axis=1)

    motions = chain_pair_motions(chain, cam_pose, base_angles, deltas)
    res = np.full((d, len(pts)), np.inf)
    for j in range(d):
        moved = pts @ motions[j].rotation.T + motions[j].translation
        front = moved[:, 2] > 1e-9
        proj = np.full((len(pts), 2), np.inf)
        proj[front] = camera.project(moved[front])
        res[j] = np.linalg.norm(targets - proj, axis=1)
    best = np.argmin(res, axis=0)
    best_res = res[best, np.arange(len(pts))]
    member = best_res < cfg.ba.inlier_px

    grown_pts: list[np.ndarray | None] = [None] * d
    grown_tgt: list[np.ndarray | None] = [None] * d
    for j in range(d):
        idx = np.nonzero(member & (best == j))[0]
        if idx.size == 0:
            continue
        if idx.size > max_per_joint:
            idx = np.sort(rng.choice(idx, size=max_per_joint, replace=False))
        grown_pts[j] = pts[idx]
        grown_tgt[j] = targets[idx]
    return grown_pts, grown_tgt


@dataclass
class PairDiagnostic:
    pair: int
    part: int | None
    stage: str
    error: str

    def to_dict(self) -> dict:
        return {"pair": self.pair, "part": self.part, "stage": self.stage, "error": self.error}


@dataclass
class PipelineResult:
    trajectory: JointTrajectory
    report: EvaluationReport | None
    gt_trajectory: JointTrajectory | None
    result_doc: dict
    diagnostics: list[PairDiagnostic]
    wall_time_s: float


def _canonical_json(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, indent=2)


def run_pipeline(cfg: PipelineConfig) -> PipelineResult:
    """Run the full estimation pipeline under one configuration.

    Per adjacent pair: segmentation (RANSAC + EM), optional joint
    epipolar+photometric flow refinement with re-segmentation, per-part pose
    recovery, and (with depth) metric scale recovery and reprojection
    refinement.  Angle changes are then accumulated, the point clouds merged,
    and the final row photometrically adjusted.  Per-part failures are
    recorded and leave zero-confidence entries rather than aborting.
    """
    t_start = time.perf_counter()
    bundle = _simulate_inputs(cfg) if cfg.preset else _load_input_dir(cfg.input_dir)
    n = len(bundle.images)
    d = bundle.chain.dof
    use_depth = cfg.use_depth if cfg.use_depth is not None else bundle.depths is not None
    if use_depth and bundle.depths is None:
        raise ConfigError("use_depth requested but the input carries no depth")

    diagnostics: list[PairDiagnostic] = []
    deltas = np.zeros((n - 1, d))
    confidences = np.zeros((n - 1, d))
    base_angles = np.zeros(d)
    prev_labels: np.ndarray | None = None
    pair_clouds: list[ba_mod.PointCloud] = []
    flows = list(bundle.flows)

    for k in range(n - 1):
        seg_cfg = dataclasses.replace(cfg.segmentation, seed=cfg.seed)
        rng = np.random.default_rng([max(cfg.seed, 0), 1000 + k])
        cs = correspondences_from_flow(flows[k])
        try:
            seg = ransac_init(cs, bundle.camera, d, seg_cfg, rng)
            seg = em_refine(cs, bundle.camera, seg, seg_cfg, rng)
        except ArtiposeError as exc:
            diagnostics.append(PairDiagnostic(k, None, "segmentation", str(exc)))
            continue

        if prev_labels is None:
            perm = _association_permutation(list(seg.motions), bundle.chain, bundle.cam_pose, base_angles)
        else:
            perm = _overlap_permutation(prev_labels, seg.labeling.labels, d)
        seg = _relabel(seg, perm, d)

        def joint_members(current_cs: Correspondences, labeling: PartLabeling):
            grid = labeling.labels
            px = current_cs.p.astype(int)
            px_labels = grid[px[:, 1], px[:, 0]]
            parts: list[Correspondences | None] = []
            for j in range(d):
                idx = np.nonzero(px_labels == j + 1)[0]
                if idx.size > cfg.joint_fit.max_points_per_part:
                    idx = np.sort(rng.choice(idx, size=cfg.joint_fit.max_points_per_part, replace=False))
                parts.append(current_cs.subset(idx) if idx.size else None)
            return parts

        def estimate_deltas(current_cs, current_seg, init_deltas):
            if not cfg.joint_fit.enabled:
                return init_deltas, None
            try:
                fitted_deltas, _obj = fit_pair_deltas(
                    joint_members(current_cs, current_seg.labeling),
                    bundle.camera, bundle.chain, bundle.cam_pose,
                    base_angles, init_deltas, cfg.joint_fit,
                )
                fitted = chain_pair_motions(bundle.chain, bundle.cam_pose, base_angles, fitted_deltas)
                return fitted_deltas, fitted
            except ArtiposeError as exc:
                diagnostics.append(PairDiagnostic(k, None, "joint_fit", str(exc)))
                return init_deltas, None

        # Initial deltas from the per-part decompositions, then the
        # chain-constrained joint fit, which pools every descendant link's
        # pixels behind each joint and is far more noise-robust.
        pair_deltas, misalign = pair_joint_angles(
            list(seg.motions), bundle.chain, bundle.cam_pose, base_angles
        )
        confidences[k] = np.clip(1.0 - misalign, 0.0, 1.0)
        pair_deltas, fitted_motions = estimate_deltas(cs, seg, pair_deltas)

        # Refinement rounds.  The first pass is photometric-only: until the
        # joint fit has converged, epipolar targets would pin the endpoints'
        # cross-line coordinate to the current estimate and erase the very
        # signal the next fit needs.  Later passes use the combined objective
        # with the chain-constrained epipolar lines.
        try:
            for r in range(cfg.refine_rounds):
                if r == 0 and cfg.joint_fit.enabled:
                    round_cfg = dataclasses.replace(cfg.refinement, lambda_epipolar=0.0)
                    essentials = seg.essentials
                else:
                    round_cfg = cfg.refinement
                    if fitted_motions is not None:
                        essentials = tuple(
                            EssentialMatrix.from_motion(m) for m in fitted_motions
                        )
                    else:
                        essentials = seg.essentials
                flows[k] = refine_flow(
                    bundle.images[k],
                    bundle.images[k + 1],
                    flows[k],
                    seg.labeling,
                    seg.motions,
                    bundle.camera,
                    round_cfg,
                    essentials=essentials,
                )
                cs = correspondences_from_flow(flows[k])
                if fitted_motions is not None:
                    seg = dataclasses.replace(
                        seg,
                        motions=tuple(fitted_motions),
                        essentials=tuple(EssentialMatrix.from_motion(m) for m in fitted_motions),
                    )
                seg = em_refine(cs, bundle.camera, seg, seg_cfg, rng)
                pair_deltas, fitted_motions = estimate_deltas(cs, seg, pair_deltas)
        except ArtiposeError as exc:
            diagnostics.append(PairDiagnostic(k, None, "refinement", str(exc)))

        prev_labels = seg.labeling.labels
        motions: list[RigidMotion | None] = (
            list(fitted_motions) if fitted_motions is not None else list(seg.motions)
        )

        if use_depth:
            cloud, _skipped = ba_mod.backproject(
                bundle.depths[k], bundle.camera, seg.labeling, bundle.images[k], frame_index=k
            )
            depth_motions: list[RigidMotion | None] = [None] * d
            fit_points: list[np.ndarray | None] = [None] * d
            fit_targets: list[np.ndarray | None] = [None] * d
            kept = []
            for j in range(d):
                idx = np.nonzero(cloud.labels == j + 1)[0]
                if idx.size == 0:
                    diagnostics.append(PairDiagnostic(k, j + 1, "backproject", "no valid depth"))
                    continue
                if idx.size > cfg.ba.max_points_per_part:
                    idx = rng.choice(idx, size=cfg.ba.max_points_per_part, replace=False)
                    idx.sort()
                sub = cloud.subset(idx)
                try:
                    m0 = motions[j]
                    if m0 is None or not m0.scale_known:
                        m0 = ba_mod.recover_scale(
                            sub, flows[k], bundle.depths[k + 1], seg.motions[j], bundle.camera
                        )
                    refined = ba_mod.refine_pair_pose(
                        sub, flows[k], m0, bundle.camera, cfg.ba.inlier_px, cfg.ba.gn_iterations
                    )
                    depth_motions[j] = refined.motion
                    inl = refined.inliers.indices
                    if inl.size:
                        chosen = sub.subset(inl)
                        uf, _ = ba_mod.sample_bilinear(flows[k].u, chosen.pixels)
                        vf, _ = ba_mod.sample_bilinear(flows[k].v, chosen.pixels)
                        fit_points[j] = chosen.points
                        fit_targets[j] = chosen.pixels + np.stack([uf, vf], axis=1)
                except ArtiposeError as exc:
                    diagnostics.append(PairDiagnostic(k, j + 1, "pair_pose", str(exc)))
                keep = idx if idx.size <= cfg.ba.cloud_points_per_part else rng.choice(
                    idx, size=cfg.ba.cloud_points_per_part, replace=False
                )
                kept.append(cloud.subset(np.sort(keep)))
            if kept:
                pair_clouds.append(ba_mod.PointCloud.concatenate(kept))
            if any(p is not None for p in fit_points):
                # Grow each joint's support by 3-D inlier gating over every
                # valid-depth pixel (the segmentation can only label pixels
                # whose flow clears the static threshold; with depth, the
                # reprojection residual is informative at any magnitude), then
                # fit the deltas on the grown support.  The 6-DoF per-part
                # poses above are informative but free to drift along the
                # shallow rotation/translation valley of a small part; the
                # chain constraint pins them back to d parameters.
                grown_pts, grown_tgt = _grow_depth_support(
                    bundle.depths[k], flows[k], bundle.images[k], bundle.camera, bundle.chain,
                    bundle.cam_pose, base_angles, pair_deltas, cfg, rng,
                )
                if not any(p is not None for p in grown_pts):
                    grown_pts, grown_tgt = fit_points, fit_targets
                pair_deltas, _obj = fit_pair_deltas_reprojection(
                    grown_pts, grown_tgt, bundle.camera, bundle.chain, bundle.cam_pose,
                    base_angles, pair_deltas, cfg.ba.inlier_px, cfg.joint_fit,
                )
            for j in range(d):
                if depth_motions[j] is None:
                    confidences[k, j] = min(confidences[k, j], 0.5)

        deltas[k] = pair_deltas
        base_angles = base_angles + pair_deltas

    traj = accumulate(deltas, confidences)

    ba_info = None
    accumulated = None
    if use_depth and pair_clouds:
        traced = []
        for pc in pair_clouds:
            src = int(pc.source_frame[0])
            traced.append(ba_mod.trace_cloud(pc, flows[src:]))
        accumulated = ba_mod.accumulate_cloud(traced, traj, bundle.chain, bundle.cam_pose)
        if len(accumulated) > cfg.ba.final_max_points:
            rng_ba = np.random.default_rng([max(cfg.seed, 0), 999983])
            keep = rng_ba.choice(len(accumulated), size=cfg.ba.final_max_points, replace=False)
            accumulated = accumulated.subset(np.sort(keep))
        try:
            traj, ba_info = ba_mod.final_ba(
                bundle.images[-1],
                accumulated,
                traj,
                bundle.chain,
                bundle.camera,
                bundle.cam_pose,
                cfg.ba.final,
            )
        except NoOverlapError as exc:
            diagnostics.append(PairDiagnostic(n - 2, None, "final_ba", str(exc)))

    gt_traj = None
    report = None
    wall = time.perf_counter() - t_start
    if bundle.gt_schedule is not None:
        gt = bundle.gt_schedule - bundle.gt_schedule[0]
        gt_traj = JointTrajectory(gt, np.ones_like(gt))
        report = evaluate(traj, gt_traj, cfg.threshold_deg, wall_time_s=wall)

    doc = {
        "format": RESULT_FORMAT,
        "config": cfg.to_dict(),
        "dof": d,
        "n_frames": n,
        "trajectory_rad": traj.angles.tolist(),
        "confidence": traj.confidence.tolist(),
        "report": report.to_dict() if report is not None else None,
        "diagnostics": [diag.to_dict() for diag in diagnostics],
        "final_ba": None
        if ba_info is None
        else {
            "initial_objective": ba_info.initial_objective,
            "final_objective": ba_info.final_objective,
            "iterations": ba_info.iterations,
            "flat": ba_info.flat,
        },
    }

    if cfg.out_dir:
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "result.json").write_text(_canonical_json(doc))
        (out / "meta.json").write_text(json.dumps({"wall_time_s": wall}, sort_keys=True))
        if cfg.emit_csv:
            _write_csv(out / "trajectory.csv", traj)
        if cfg.emit_masks and prev_labels is not None:
            from PIL import Image as PILImage

            PILImage.fromarray(prev_labels.astype(np.uint8), mode="L").save(out / "labels_last_pair.png")
        if cfg.emit_ply and accumulated is not None:
            ba_mod.write_ply(accumulated, out / "accumulated_cloud.ply")

    return PipelineResult(traj, report, gt_traj, doc, diagnostics, wall)


def _write_csv(path: Path, traj: JointTrajectory) -> None:
    header = ",".join(
        ["frame"]
        + [f"theta_{j}_rad" for j in range(traj.dof)]
        + [f"confidence_{j}" for j in range(traj.dof)]
    )
    rows = [header]
    for i in range(traj.n_frames):
        cells = [str(i)] + [repr(float(a)) for a in traj.angles[i]] + [
            repr(float(c)) for c in traj.confidence[i]
        ]
        rows.append(",".join(cells))
    path.write_text("\n".join(rows) + "\n")


ABLATION_VARIANTS = ("flow", "flow+epipolar", "flow+epipolar+depth")


def run_ablation(cfg: PipelineConfig, variants=ABLATION_VARIANTS) -> dict:
    """Run the ablation grid on one configuration: no refinement / epipolar
    refinement / refinement plus depth-based adjustment."""
    rows = {}
    for variant in variants:
        if variant == "flow":
            sub = dataclasses.replace(cfg, refine_rounds=0, use_depth=False, out_dir=None)
        elif variant == "flow+epipolar":
            sub = dataclasses.replace(cfg, use_depth=False, out_dir=None)
        elif variant == "flow+epipolar+depth":
            sub = dataclasses.replace(cfg, use_depth=True, out_dir=None)
        else:
            raise ConfigError(f"unknown ablation variant {variant!r}")
        res = run_pipeline(sub)
        rows[variant] = {
            "report": None if res.report is None else res.report.to_dict(),
            "wall_time_s": res.wall_time_s,
        }
    return rows


def simulate_to_dir(
    preset: str,
    seed: int,
    frames: int,
    out_dir: str,
    width: int = 128,
    height: int = 96,
    flow_noise_px: float = 0.0,
    depth_noise: float = 0.0,
) -> dict:
    """Generate a preset scene and write it (optionally degraded) to disk."""
    scene = make_scene(preset, seed=seed, frames=frames, width=width, height=height)
    rendered = render_sequence(scene)
    if flow_noise_px > 0 or depth_noise > 0:
        rendered = [
            perturb(fr, NoiseSpec(flow_noise_px, depth_noise, seed=seed * 1009 + 7919 * i))
            for i, fr in enumerate(rendered)
        ]
    return write_scene(scene, rendered, out_dir)

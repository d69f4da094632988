"""Motion-based part discovery.

Sequential RANSAC assigns an initial part label to every sufficiently
moving pixel; EM then alternates re-labeling (E-step, squared endpoint
epipolar distance with an outlier class) with per-part eight-point refits
(M-step).  The monitored objective sum(min(dist^2, tau_out^2)) over moving
pixels never increases: the E-step minimizes it exactly for fixed motions,
and M-step refits are rejected unless they keep it non-increasing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CheiralityAmbiguousError,
    DegenerateConfigurationError,
    InsufficientDataError,
    MonotonicityError,
    PartsNotFoundError,
)
from .geometry import (
    CameraIntrinsics,
    Correspondences,
    EssentialMatrix,
    RigidMotion,
    decompose_essential,
    estimate_essential_8pt,
    sampson_distance,
)

MIN_PART_PIXELS = 8


@dataclass(frozen=True)
class PartLabeling:
    """Per-pixel part assignment: 0 = background/outlier, 1..d = moving parts.

    Any nonzero label with fewer than 8 member pixels is demoted to 0 on
    construction.
    """

    labels: np.ndarray
    d: int

    def __post_init__(self):
        lab = np.asarray(self.labels, dtype=np.int32)
        if lab.ndim != 2:
            raise ValueError("labels must be a 2-D array")
        if lab.min() < 0 or lab.max() > self.d:
            raise ValueError(f"labels must lie in 0..{self.d}")
        counts = np.bincount(lab.ravel(), minlength=self.d + 1)
        small = np.nonzero(counts[1:] < MIN_PART_PIXELS)[0] + 1
        if small.size:
            lab = lab.copy()
            lab[np.isin(lab, small)] = 0
        object.__setattr__(self, "labels", lab)

    def member_count(self, part: int) -> int:
        return int(np.count_nonzero(self.labels == part))


@dataclass(frozen=True)
class SegmentationConfig:
    sampson_inlier_px: float = 1.5  # RANSAC consensus threshold
    outlier_px: float = 3.0  # EM outlier class threshold
    static_px: float = 0.3  # flow magnitude below which a pixel is background
    ransac_trials: int = 500
    ransac_confidence: float = 0.999
    sample_neighborhood: int = 240  # local pool a minimal sample is drawn from
    preference_margin: float = 0.5  # a new model must beat old ones by this factor
    max_score_points: int = 2500  # trial hypotheses are scored on this many pixels
    em_max_iters: int = 20
    em_tol_frac: float = 0.001  # stop when fewer labels change
    max_fit_points: int = 3000  # cap for least-squares refits
    seed: int = 0


@dataclass(frozen=True)
class SegmentationResult:
    """Labels plus per-part motions.

    ``essentials`` keeps each part's least-squares essential matrix: at
    small baselines it is a far better epipolar model than rebuilding
    skew(t) R from the decomposed motion, so downstream epipolar scoring
    and flow refinement should prefer it.
    """

    labeling: PartLabeling
    motions: tuple[RigidMotion, ...]
    frozen: tuple[bool, ...] = field(default=())
    essentials: tuple[EssentialMatrix, ...] = field(default=())
    iterations: int = 0
    objective: float | None = None

    def __post_init__(self):
        if not self.frozen:
            object.__setattr__(self, "frozen", tuple(False for _ in self.motions))
        if not self.essentials:
            object.__setattr__(
                self, "essentials", tuple(EssentialMatrix.from_motion(m) for m in self.motions)
            )


def _subsample(rng: np.random.Generator, idx: np.ndarray, cap: int) -> np.ndarray:
    if idx.size <= cap:
        return idx
    return rng.choice(idx, size=cap, replace=False)


def _adaptive_trials(hit_frac: float, confidence: float, cap: int) -> int:
    """Trials needed so that at least one succeeds with the given confidence.

    A trial succeeds when its seed lands in the sought part and the local
    sample stays pure; the 0.5 factor budgets for boundary-contaminated
    samples.
    """
    hit = 0.5 * min(hit_frac, 1.0)
    if hit <= 1e-9:
        return cap
    need = math.log(1.0 - confidence) / math.log(max(1.0 - hit, 1e-12))
    return min(cap, max(32, int(math.ceil(need))))


def ransac_init(
    cs: Correspondences,
    k: CameraIntrinsics,
    d: int,
    cfg: SegmentationConfig = SegmentationConfig(),
    rng: np.random.Generator | None = None,
) -> SegmentationResult:
    """Sequential multi-model RANSAC over dense correspondences.

    Pixels moving less than ``static_px`` are pre-assigned to the
    background.  Parts are extracted greedily: each trial fits an essential
    matrix to a spatially local 8-sample (a seed pixel plus 7 random
    near-neighbors, so the sample lies on one rigid part), and is scored by
    how many moving pixels it explains within the threshold *better than
    every previously extracted model*.  The best hypothesis is refit by
    least squares and its preferred pixels take the new label.  Scoring by
    relative preference rather than removing absolute-consensus pixels is
    what keeps nearly-parallel part motions (whose epipolar consensus sets
    overlap almost completely) from collapsing into one model.  Seeds for
    later parts are drawn with probability proportional to how badly a
    pixel is explained so far.  Correspondences are canonically sorted by
    pixel first, so the result does not depend on input ordering.
    """
    if d < 1:
        raise ValueError("expected part count d must be >= 1")
    if cs.shape is None:
        raise ValueError("correspondences must carry their source grid shape")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)

    order = np.lexsort((cs.p[:, 0], cs.p[:, 1]))
    cs = cs.subset(order)

    moving_mask = cs.flow_magnitude() >= cfg.static_px
    mov_idx = np.nonzero(moving_mask)[0]
    if mov_idx.size < MIN_PART_PIXELS:
        raise PartsNotFoundError(expected=d, found=0)
    mov_cs = cs.subset(mov_idx)
    n_mov = mov_idx.size

    from scipy.spatial import cKDTree

    tree = cKDTree(mov_cs.p)
    k_neigh = int(min(max(cfg.sample_neighborhood, MIN_PART_PIXELS), n_mov))

    labels = np.zeros(n_mov, dtype=np.int32)
    dist_best = np.full(n_mov, np.inf)
    score_idx = _subsample(rng, np.arange(n_mov), cfg.max_score_points)
    score_idx.sort()
    score_cs = mov_cs.subset(score_idx)
    motions: list[RigidMotion] = []
    essentials: list[EssentialMatrix] = []

    for part in range(1, d + 1):
        # Seed where the current models explain the data worst.
        weights = np.minimum(np.where(np.isfinite(dist_best), dist_best, 1.0), cfg.outlier_px)
        wsum = float(weights.sum())
        probs = None if wsum <= 0 else weights / wsum

        # Residual-scale ladder, finest first.  Scores are compared
        # lexicographically, so whichever scale first separates hypotheses
        # decides: on clean data a pure single-part fit holds its whole part
        # at machine-level residuals and crushes any compromise fit spread
        # across parts; on noisy data the fine levels are empty and the
        # comparison gracefully degrades to plain consensus counting.
        ladder = [cfg.sampson_inlier_px / f for f in (4096.0, 256.0, 16.0, 4.0, 1.0)]

        def ladder_score(dist: np.ndarray, novel: np.ndarray) -> tuple:
            dn = dist[novel]
            return tuple(int(np.count_nonzero(dn < level)) for level in ladder)

        best_novel: np.ndarray | None = None
        best_e = None
        best_dist: np.ndarray | None = None
        best_score: tuple = ()
        trials_needed = cfg.ransac_trials
        trial = 0
        while trial < min(trials_needed, cfg.ransac_trials):
            trial += 1
            seed = int(rng.choice(n_mov, p=probs))
            _, neigh = tree.query(mov_cs.p[seed], k=k_neigh)
            neigh = np.atleast_1d(neigh)
            others = neigh[neigh != seed]
            if others.size < MIN_PART_PIXELS - 1:
                continue
            sample = np.concatenate([[seed], rng.choice(others, MIN_PART_PIXELS - 1, replace=False)])
            try:
                e = estimate_essential_8pt(mov_cs.subset(sample), k)
            except (DegenerateConfigurationError, InsufficientDataError):
                continue
            dist_s = sampson_distance(score_cs, e, k)
            preferred = dist_s < cfg.preference_margin * dist_best[score_idx]
            novel = np.nonzero((dist_s < cfg.sampson_inlier_px) & preferred)[0]
            score = ladder_score(dist_s, novel)
            if best_novel is None or score > best_score:
                best_score = score
                best_e = e
                # Expand the winning hypothesis from the scoring subset to
                # the full moving set.
                best_dist = sampson_distance(mov_cs, e, k)
                best_novel = np.nonzero(
                    (best_dist < cfg.sampson_inlier_px)
                    & (best_dist < cfg.preference_margin * dist_best)
                )[0]
                trials_needed = _adaptive_trials(
                    novel.size / max(score_idx.size, 1), cfg.ransac_confidence, cfg.ransac_trials
                )
        if best_novel is None or best_novel.size < MIN_PART_PIXELS:
            raise PartsNotFoundError(expected=d, found=part - 1)

        def strongest_subset(dist: np.ndarray, members: np.ndarray) -> np.ndarray:
            """Members below the finest ladder level still holding a crowd."""
            for level in ladder:
                sub = members[dist[members] < level]
                if sub.size >= 3 * MIN_PART_PIXELS:
                    return sub
            return members

        def subset_score(dist_full: np.ndarray) -> tuple:
            ds = dist_full[score_idx]
            nv = np.nonzero(
                (ds < cfg.sampson_inlier_px) & (ds < cfg.preference_margin * dist_best[score_idx])
            )[0]
            return ladder_score(ds, nv)

        # Least-squares refit on the strongest members only: refitting on the
        # whole tau-level set would blend in other parts' pixels and replace
        # a pure hypothesis with a compromise.
        e, dist = best_e, best_dist
        fit_idx = _subsample(rng, strongest_subset(dist, best_novel), cfg.max_fit_points)
        if fit_idx.size >= MIN_PART_PIXELS:
            try:
                e2 = estimate_essential_8pt(mov_cs.subset(fit_idx), k)
                dist2 = sampson_distance(mov_cs, e2, k)
                novel2 = np.nonzero(
                    (dist2 < cfg.sampson_inlier_px) & (dist2 < cfg.preference_margin * dist_best)
                )[0]
                if novel2.size >= MIN_PART_PIXELS and subset_score(dist2) >= subset_score(dist):
                    e, dist, best_novel = e2, dist2, novel2
            except DegenerateConfigurationError:
                pass
        # Cheirality can be a coin flip for noisy near-planar parts; escalate
        # to a larger vote set, and as a last resort keep the fitted essential
        # matrix with a placeholder motion (labels, EM distances, and flow
        # refinement all work from the essential matrix alone).
        motion = None
        for votes in (
            _subsample(rng, strongest_subset(dist, best_novel), cfg.max_fit_points),
            _subsample(rng, best_novel, cfg.max_fit_points),
        ):
            try:
                motion = decompose_essential(e, mov_cs.subset(votes), k)
                break
            except CheiralityAmbiguousError:
                continue
        if motion is None:
            motion = RigidMotion(np.eye(3), np.array([0.0, 0.0, 1.0]), scale_known=False)
        motions.append(motion)
        essentials.append(e)
        labels[best_novel] = part
        dist_best = np.minimum(dist_best, dist)

    flat = np.zeros(len(cs), dtype=np.int32)
    flat[mov_idx] = labels
    h, w = cs.shape
    grid = np.zeros((h, w), dtype=np.int32)
    px = cs.p.astype(int)
    grid[px[:, 1], px[:, 0]] = flat
    return SegmentationResult(PartLabeling(grid, d), tuple(motions), essentials=tuple(essentials))


def _labels_from_grid(cs: Correspondences, labeling: PartLabeling) -> np.ndarray:
    px = cs.p.astype(int)
    return labeling.labels[px[:, 1], px[:, 0]]


def em_refine(
    cs: Correspondences,
    k: CameraIntrinsics,
    init: SegmentationResult,
    cfg: SegmentationConfig = SegmentationConfig(),
    rng: np.random.Generator | None = None,
) -> SegmentationResult:
    """EM refinement of a part labeling.

    E-step: every moving pixel takes the part whose motion gives the
    smallest endpoint epipolar distance, or the outlier class if even the
    best exceeds ``outlier_px``.  M-step: each part with enough members is
    refit by least-squares eight-point and decomposed; a refit is kept only
    if it does not increase the monitored objective.  Parts whose
    membership drops below 8 are frozen at their last motion and flagged.
    """
    if cs.shape is None:
        raise ValueError("correspondences must carry their source grid shape")
    if rng is None:
        rng = np.random.default_rng(cfg.seed + 1)
    d = init.labeling.d
    if len(init.motions) != d:
        raise ValueError("initialization must carry one motion per part")

    order = np.lexsort((cs.p[:, 0], cs.p[:, 1]))
    cs = cs.subset(order)
    moving = cs.flow_magnitude() >= cfg.static_px
    mov_idx = np.nonzero(moving)[0]
    mov_cs = cs.subset(mov_idx)
    n_mov = mov_idx.size
    if n_mov == 0:
        raise InsufficientDataError("no moving pixels to refine")

    motions = list(init.motions)
    essentials = list(init.essentials)
    frozen = list(init.frozen) if init.frozen else [False] * d
    labels = _labels_from_grid(cs, init.labeling)[mov_idx]
    cap_sq = cfg.outlier_px**2

    def distances() -> np.ndarray:
        out = np.empty((d, n_mov))
        for i, e in enumerate(essentials):
            out[i] = sampson_distance(mov_cs, e, k)
        return out

    def assignment_cost(lab: np.ndarray, dst: np.ndarray) -> float:
        """Robust objective: truncated squared distance, outliers pay the cap."""
        cost = np.full(n_mov, cap_sq)
        assigned = lab > 0
        if assigned.any():
            da = dst[lab[assigned] - 1, np.nonzero(assigned)[0]]
            cost[assigned] = np.minimum(da**2, cap_sq)
        return float(cost.sum())

    dist = distances()
    prev_objective = assignment_cost(labels, dist)
    iterations = 0
    for iterations in range(1, cfg.em_max_iters + 1):
        # E-step: argmin over parts with an outlier class at the cap.
        best = np.argmin(dist, axis=0)
        best_d = dist[best, np.arange(n_mov)]
        new_labels = np.where(best_d < cfg.outlier_px, best + 1, 0).astype(np.int32)
        objective = float(np.sum(np.minimum(best_d**2, cap_sq)))
        if objective > prev_objective + 1e-9:
            raise MonotonicityError("EM objective increased after E-step")

        # Demote starved parts (hard >=8-member constraint, outside the
        # optimization; its bounded effect is accounted for explicitly).
        counts = np.bincount(new_labels, minlength=d + 1)
        for part in range(1, d + 1):
            if counts[part] < MIN_PART_PIXELS:
                new_labels[new_labels == part] = 0
                frozen[part - 1] = True
        objective = assignment_cost(new_labels, dist)

        changed = int(np.count_nonzero(new_labels != labels))
        labels = new_labels

        # M-step: per-part least-squares refit, kept only if non-increasing.
        for part in range(1, d + 1):
            members = np.nonzero(labels == part)[0]
            if members.size < MIN_PART_PIXELS or frozen[part - 1]:
                continue
            fit_idx = _subsample(rng, members, cfg.max_fit_points)
            try:
                e = estimate_essential_8pt(mov_cs.subset(fit_idx), k)
                candidate = decompose_essential(e, mov_cs.subset(fit_idx), k)
            except (DegenerateConfigurationError, CheiralityAmbiguousError, InsufficientDataError):
                continue
            new_d = sampson_distance(mov_cs.subset(members), e, k)
            old_cost = float(np.sum(np.minimum(dist[part - 1, members] ** 2, cap_sq)))
            new_cost = float(np.sum(np.minimum(new_d**2, cap_sq)))
            if new_cost <= old_cost:
                motions[part - 1] = candidate
                essentials[part - 1] = e
                dist[part - 1] = sampson_distance(mov_cs, e, k)
                objective += new_cost - old_cost
        if objective > assignment_cost(labels, dist) + 1e-6:
            raise MonotonicityError("EM objective bookkeeping diverged after M-step")
        prev_objective = objective

        if changed < cfg.em_tol_frac * n_mov:
            break

    flat = np.zeros(len(cs), dtype=np.int32)
    flat[mov_idx] = labels
    h, w = cs.shape
    grid = np.zeros((h, w), dtype=np.int32)
    px = cs.p.astype(int)
    grid[px[:, 1], px[:, 0]] = flat
    return SegmentationResult(
        PartLabeling(grid, d),
        tuple(motions),
        tuple(frozen),
        tuple(essentials),
        iterations,
        prev_objective,
    )

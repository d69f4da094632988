import dataclasses

import numpy as np
import pytest

from artipose.ba import (
    FinalBaConfig,
    PointCloud,
    accumulate_cloud,
    advance_pixels,
    backproject,
    final_ba,
    recover_scale,
    refine_pair_pose,
    select_inliers,
    trace_cloud,
    write_ply,
)
from artipose.errors import InsufficientSupportError, NoOverlapError
from artipose.flow import DepthMap, FlowField, Image
from artipose.geometry import CameraIntrinsics, RigidMotion
from artipose.kinematics import JointTrajectory, rotation_about_axis
from artipose.segmentation import PartLabeling
from artipose import simulator as sim


@pytest.fixture(scope="module")
def scene():
    return sim.make_scene("arm3", seed=2, frames=4)


@pytest.fixture(scope="module")
def frames(scene):
    return sim.render_sequence(scene)


def part_cloud(scene, frames, idx=0, label=2, cap=800):
    """One part's cloud, restricted to pixels whose flow is defined."""
    fr = frames[idx]
    cloud, _ = backproject(fr.depth, scene.camera, fr.mask, fr.image, frame_index=idx)
    px = cloud.pixels.astype(int)
    flow_ok = fr.flow.valid[px[:, 1], px[:, 0]]
    sel = np.nonzero((cloud.labels == label) & flow_ok)[0]
    if sel.size > cap:
        sel = np.sort(np.random.default_rng(0).choice(sel, cap, replace=False))
    return cloud.subset(sel)


class TestBackproject:
    def test_principal_point(self):
        cam = CameraIntrinsics(fx=100, fy=100, cx=8, cy=6, width=16, height=12)
        d = np.zeros((12, 16), dtype=np.float32)
        d[6, 8] = 2.0
        labels = np.zeros((12, 16), dtype=np.int32)
        labels[6, :] = 1
        img = Image(np.full((12, 16, 3), 0.5))
        cloud, skipped = backproject(DepthMap(d), cam, PartLabeling(labels, 1), img)
        assert len(cloud) == 1
        assert np.allclose(cloud.points[0], [0.0, 0.0, 2.0], atol=1e-12)
        assert skipped == 15

    def test_matches_simulator_points(self, scene, frames):
        fr = frames[0]
        cloud, _ = backproject(fr.depth, scene.camera, fr.mask, fr.image)
        px = cloud.pixels.astype(int)
        expected = fr.point_map[px[:, 1], px[:, 0]]
        assert np.abs(cloud.points - expected).max() < 1e-5

    def test_all_invalid_depth(self):
        cam = CameraIntrinsics(fx=10, fy=10, cx=2, cy=2, width=4, height=4)
        labels = PartLabeling(np.ones((4, 4), dtype=np.int32), 1)
        img = Image(np.zeros((4, 4, 3)))
        cloud, skipped = backproject(DepthMap(np.zeros((4, 4), np.float32)), cam, labels, img)
        assert len(cloud) == 0 and skipped == 16


class TestScaleRecovery:
    def test_exact_scale(self, scene, frames):
        cloud = part_cloud(scene, frames)
        gt = sim.part_pair_motions(scene, 0)[2]
        unit = RigidMotion(gt.rotation, gt.translation / np.linalg.norm(gt.translation), scale_known=False)
        rec = recover_scale(cloud, frames[0].flow, frames[1].depth, unit, scene.camera)
        assert rec.scale_known
        # float32 rasters and bilinear depth sampling set a ~1e-5 floor
        assert np.linalg.norm(rec.translation - gt.translation) < 1e-4


class TestSelectInliers:
    def test_exact_data_full_inliers(self, scene, frames):
        cloud = part_cloud(scene, frames)
        gt = sim.part_pair_motions(scene, 0)[2]
        inl = select_inliers(cloud, frames[0].flow, gt, scene.camera, t=1.0)
        assert len(inl) == len(cloud)

    def test_perturbed_rotation_fewer_inliers(self, scene, frames):
        cloud = part_cloud(scene, frames)
        gt = sim.part_pair_motions(scene, 0)[2]
        bad = RigidMotion(rotation_about_axis(np.array([0, 1, 0.0]), np.radians(5)) @ gt.rotation,
                          gt.translation)
        good = select_inliers(cloud, frames[0].flow, gt, scene.camera, t=1.0)
        worse = select_inliers(cloud, frames[0].flow, bad, scene.camera, t=1.0)
        assert len(worse) < len(good)

    def test_empty_cloud(self, scene, frames):
        inl = select_inliers(PointCloud.empty(), frames[0].flow,
                             sim.part_pair_motions(scene, 0)[1], scene.camera, t=1.0)
        assert len(inl) == 0

    def test_deterministic(self, scene, frames):
        cloud = part_cloud(scene, frames)
        gt = sim.part_pair_motions(scene, 0)[2]
        a = select_inliers(cloud, frames[0].flow, gt, scene.camera, t=3.0)
        b = select_inliers(cloud, frames[0].flow, gt, scene.camera, t=3.0)
        assert np.array_equal(a.indices, b.indices)

    def test_requires_metric_motion(self, scene, frames):
        cloud = part_cloud(scene, frames)
        gt = sim.part_pair_motions(scene, 0)[2]
        unit = RigidMotion(gt.rotation, gt.translation / np.linalg.norm(gt.translation), scale_known=False)
        with pytest.raises(ValueError):
            select_inliers(cloud, frames[0].flow, unit, scene.camera, t=3.0)


class TestRefinePairPose:
    def test_stationary_at_ground_truth(self, scene, frames):
        cloud = part_cloud(scene, frames)
        gt = sim.part_pair_motions(scene, 0)[2]
        res = refine_pair_pose(cloud, frames[0].flow, gt, scene.camera, t=3.0)
        # stationarity up to the float32 raster quantization floor
        assert res.motion.geodesic_angle_to(gt) < 1e-6
        assert np.linalg.norm(res.motion.translation - gt.translation) < 1e-6

    def test_recovers_from_perturbation(self, scene, frames):
        cloud = part_cloud(scene, frames)
        gt = sim.part_pair_motions(scene, 0)[2]
        start = RigidMotion(
            rotation_about_axis(np.array([0.0, 0, 1]), np.radians(3.0)) @ gt.rotation,
            gt.translation + np.array([0.03, 0.0, -0.01]),
        )
        res = refine_pair_pose(cloud, frames[0].flow, start, scene.camera, t=6.0)
        assert np.degrees(res.motion.geodesic_angle_to(gt)) < 0.1
        assert np.linalg.norm(res.motion.translation - gt.translation) < 1e-3

    def test_noisy_flow_monotone(self, scene, frames):
        cloud = part_cloud(scene, frames)
        gt = sim.part_pair_motions(scene, 0)[2]
        noisy = sim.perturb(frames[0], sim.NoiseSpec(flow_sigma_px=1.0, seed=5))
        start = RigidMotion(
            rotation_about_axis(np.array([0.0, 1, 0]), np.radians(2.0)) @ gt.rotation, gt.translation
        )
        res = refine_pair_pose(cloud, noisy.flow, start, scene.camera, t=6.0)
        assert res.final_rms_px <= res.initial_rms_px + 1e-9

    def test_too_few_inliers(self, scene, frames):
        cloud = part_cloud(scene, frames)
        gt = sim.part_pair_motions(scene, 0)[2]
        far = RigidMotion(gt.rotation, gt.translation + np.array([5.0, 5.0, 5.0]))
        with pytest.raises(InsufficientSupportError):
            refine_pair_pose(cloud, frames[0].flow, far, scene.camera, t=0.5)


class TestPixelTrace:
    def test_advance_through_exact_flow(self, scene, frames):
        cloud = part_cloud(scene, frames, cap=200)
        pix, valid = advance_pixels(cloud.pixels, cloud.pixel_valid, frames[0].flow)
        gt = sim.part_pair_motions(scene, 0)[2]
        expected = scene.camera.project(gt.apply(cloud.points))
        assert np.abs(pix[valid] - expected[valid]).max() < 1e-4

    def test_trace_marks_lost_pixels(self):
        f = FlowField(np.full((4, 4), 10.0, np.float32), np.zeros((4, 4), np.float32))
        pix = np.array([[0.0, 0.0], [3.0, 3.0]])
        out, valid = advance_pixels(pix, np.array([True, True]), f)
        assert not valid.all()


class TestAccumulateCloud:
    def _traj(self, scene, rows):
        return JointTrajectory(rows, np.ones_like(rows))

    def test_static_identity(self, scene, frames):
        cloud = part_cloud(scene, frames, cap=100)
        rows = np.zeros((2, scene.dof))
        sched0 = scene.schedule[0]
        # pretending the scene sat at its frame-0 pose with zero change
        merged = accumulate_cloud([cloud], self._traj(scene, rows), scene.chain, scene.cam_pose)
        # each point equals FK(0) o FK(0)^-1 o world-point = world point
        world = scene.cam_pose.apply(cloud.points)
        t0 = scene.chain.link_transform(np.zeros(scene.dof), 1)
        expected = (world - t0[:3, 3]) @ np.linalg.inv(t0[:3, :3]).T @ t0[:3, :3].T + t0[:3, 3]
        assert np.allclose(merged.points, world, atol=1e-9)

    def test_exact_trajectory_matches_canonical(self, scene, frames):
        # accumulate pair-0 and pair-1 clouds of one part with the true
        # trajectory; both must land on the same canonical surface.
        gt_rows = scene.schedule - scene.schedule[0]
        traj = self._traj(scene, gt_rows)
        c0 = part_cloud(scene, frames, idx=0, cap=300)
        c1 = part_cloud(scene, frames, idx=1, cap=300)
        c1 = dataclasses.replace(c1, source_frame=np.full(len(c1), 1))
        merged = accumulate_cloud([c0, c1], traj, scene.chain, scene.cam_pose)
        # canonical-pose world points of the part, via local coordinates
        t_zero = scene.chain.link_transform(np.zeros(scene.dof), 1)
        local = scene.parts[1].points
        canon = local @ t_zero[:3, :3].T + t_zero[:3, 3]
        # every merged point should be near the canonical surface point set
        from scipy.spatial import cKDTree
        tree = cKDTree(canon)
        dist, _ = tree.query(merged.points)
        assert np.quantile(dist, 0.95) < 0.02

    def test_concatenates_labels_and_colors(self, scene, frames):
        c0 = part_cloud(scene, frames, cap=50)
        merged = accumulate_cloud([c0, c0], self._traj(scene, np.zeros((2, scene.dof))),
                                  scene.chain, scene.cam_pose)
        assert len(merged) == 2 * len(c0)


class TestFinalBa:
    def _setup(self, scene, frames):
        gt_rows = scene.schedule - scene.schedule[0]
        traj = JointTrajectory(gt_rows, np.ones_like(gt_rows))
        clouds = []
        for idx in range(scene.n_frames - 1):
            fr = frames[idx]
            cloud, _ = backproject(fr.depth, scene.camera, fr.mask, fr.image, frame_index=idx)
            keep = np.random.default_rng(idx).choice(len(cloud), size=min(600, len(cloud)), replace=False)
            cloud = cloud.subset(np.sort(keep))
            clouds.append(trace_cloud(cloud, frames[idx:-1 or None][: scene.n_frames - 1 - idx]
                                      if False else [f.flow for f in frames[idx:-1]]))
        merged = accumulate_cloud(clouds, traj, scene.chain, scene.cam_pose)
        return traj, merged

    def test_ground_truth_is_stationary(self, scene, frames):
        traj, merged = self._setup(scene, frames)
        out, info = final_ba(frames[-1].image, merged, traj, scene.chain, scene.camera, scene.cam_pose)
        moved = np.degrees(np.abs(out.angles[-1] - traj.angles[-1]))
        assert moved.max() < 0.05

    def test_perturbation_recovered(self, scene, frames):
        traj, merged = self._setup(scene, frames)
        bad_rows = traj.angles.copy()
        bad_rows[-1, 1] += np.radians(3.0)
        bad = JointTrajectory(bad_rows, traj.confidence)
        out, info = final_ba(frames[-1].image, merged, bad, scene.chain, scene.camera, scene.cam_pose)
        err = np.degrees(np.abs(out.angles[-1] - traj.angles[-1]))
        assert err.max() < 0.5
        assert info.final_objective <= info.initial_objective + 1e-12

    def test_flat_objective_flags_low_confidence(self, scene, frames):
        traj, merged = self._setup(scene, frames)
        flat_img = Image(np.full_like(frames[-1].image.pixels, 0.5))
        bad_rows = traj.angles.copy()
        bad_rows[-1, 0] += np.radians(2.0)
        bad = JointTrajectory(bad_rows, traj.confidence)
        out, info = final_ba(flat_img, merged, bad, scene.chain, scene.camera, scene.cam_pose)
        assert info.flat
        assert np.allclose(out.angles[-1], bad.angles[-1])
        assert (out.confidence[-1] <= FinalBaConfig().low_confidence + 1e-12).all()

    def test_no_overlap_error(self, scene, frames):
        traj, merged = self._setup(scene, frames)
        dead = dataclasses.replace(merged, pixel_valid=np.zeros(len(merged), bool))
        with pytest.raises(NoOverlapError):
            final_ba(frames[-1].image, dead, traj, scene.chain, scene.camera, scene.cam_pose)


class TestPly:
    def test_write_ply(self, tmp_path, scene, frames):
        cloud = part_cloud(scene, frames, cap=20)
        path = tmp_path / "cloud.ply"
        write_ply(cloud, path)
        text = path.read_text().splitlines()
        assert text[0] == "ply"
        assert f"element vertex {len(cloud)}" in text
        assert len(text) == 11 + len(cloud)

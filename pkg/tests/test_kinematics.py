import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from artipose.errors import FrameTagError
from artipose.geometry import RigidMotion
from artipose.kinematics import (
    FramePose,
    Joint,
    JointTrajectory,
    KinematicChain,
    accumulate,
    chain_pair_motions,
    joint_angle_from_rotation,
    pair_joint_angles,
    rotation_about_axis,
    to_model_frame,
    wrap_angle,
)


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


class TestFramePose:
    def test_compose_tags(self):
        cw = FramePose.identity("camera", "world")
        wm = FramePose.identity("world", "model")
        cm = wm.compose(cw)
        assert cm.from_frame == "camera" and cm.to_frame == "model"

    def test_compose_tag_mismatch(self):
        cw = FramePose.identity("camera", "world")
        with pytest.raises(FrameTagError):
            cw.compose(cw)

    def test_inverse_round_trip(self):
        r = rotation_about_axis(unit([1, 2, 3]), 0.7)
        p = FramePose(r, np.array([0.1, -0.2, 0.5]), "camera", "world")
        pts = np.random.default_rng(0).normal(size=(5, 3))
        assert np.allclose(p.inverse().apply(p.apply(pts)), pts, atol=1e-12)


class TestToModelFrame:
    def test_identity_frames_keep_rotation(self):
        rc = RigidMotion(rotation_about_axis(unit([0, 0, 1]), 0.4), np.array([0.0, 0, 1.0]), scale_known=False)
        out = to_model_frame(rc, FramePose.identity("camera", "world"), FramePose.identity("world", "model"))
        assert np.allclose(out.rotation, rc.rotation, atol=1e-12)

    def test_conjugation_maps_axes(self):
        # camera-to-model rotation sends z to x; a roll about camera z becomes
        # a rotation about model x.
        phi = 0.3
        rc = RigidMotion(rotation_about_axis(np.array([0.0, 0, 1]), phi), np.array([0.0, 0, 1]), scale_known=False)
        map_z_to_x = rotation_about_axis(np.array([0.0, 1, 0]), np.pi / 2)  # z -> x
        assert np.allclose(map_z_to_x @ np.array([0, 0, 1.0]), [1, 0, 0], atol=1e-12)
        wm = FramePose(map_z_to_x, np.zeros(3), "world", "model")
        out = to_model_frame(rc, FramePose.identity("camera", "world"), wm)
        expected = rotation_about_axis(np.array([1.0, 0, 0]), phi)
        assert np.allclose(out.rotation, expected, atol=1e-12)

    def test_tag_check(self):
        rc = RigidMotion(np.eye(3), np.array([0.0, 0, 1]), scale_known=False)
        with pytest.raises(FrameTagError):
            to_model_frame(rc, FramePose.identity("world", "camera"), FramePose.identity("world", "model"))

    def test_angle_preserved(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            axis = unit(rng.normal(size=3))
            phi = rng.uniform(-3, 3)
            rc = RigidMotion(rotation_about_axis(axis, phi), np.array([0.0, 0, 1]), scale_known=False)
            cam = FramePose(rotation_about_axis(unit(rng.normal(size=3)), rng.uniform(0, 3)),
                            rng.normal(size=3), "camera", "world")
            wm = FramePose(rotation_about_axis(unit(rng.normal(size=3)), rng.uniform(0, 3)),
                           rng.normal(size=3), "world", "model")
            out = to_model_frame(rc, cam, wm)
            a_in = np.arccos(np.clip((np.trace(rc.rotation) - 1) / 2, -1, 1))
            a_out = np.arccos(np.clip((np.trace(out.rotation) - 1) / 2, -1, 1))
            assert abs(a_in - a_out) < 1e-12

    def test_metric_motion_full_conjugation(self):
        rc = RigidMotion(rotation_about_axis(np.array([0.0, 0, 1]), 0.2), np.array([0.05, 0.0, 0.0]))
        cam = FramePose(rotation_about_axis(np.array([0.0, 1, 0]), 0.5), np.array([0.1, 0.2, 0.3]),
                        "camera", "world")
        wm = FramePose.identity("world", "model")
        out = to_model_frame(rc, cam, wm)
        x = cam.matrix()
        expected = x @ rc.matrix() @ np.linalg.inv(x)
        assert np.allclose(out.matrix(), expected, atol=1e-12)


class TestJointAngle:
    def test_plus_ten_degrees(self):
        axis = unit([0.3, -0.5, 0.81])
        ja = joint_angle_from_rotation(
            RigidMotion(rotation_about_axis(axis, np.radians(10)), np.array([0.0, 0, 1]), scale_known=False),
            axis,
        )
        assert ja.angle == pytest.approx(np.radians(10), abs=1e-9)
        assert ja.misalignment == pytest.approx(0.0, abs=1e-9)

    def test_opposite_axis_flips_sign(self):
        axis = unit([0.3, -0.5, 0.81])
        ja = joint_angle_from_rotation(
            RigidMotion(rotation_about_axis(-axis, np.radians(10)), np.array([0.0, 0, 1]), scale_known=False),
            axis,
        )
        assert ja.angle == pytest.approx(-np.radians(10), abs=1e-9)

    def test_identity_rotation(self):
        ja = joint_angle_from_rotation(
            RigidMotion(np.eye(3), np.array([0.0, 0, 1]), scale_known=False), np.array([0.0, 0, 1])
        )
        assert ja.angle == 0.0
        assert ja.misalignment == 0.0

    def test_rejects_non_unit_axis(self):
        with pytest.raises(ValueError):
            joint_angle_from_rotation(
                RigidMotion(np.eye(3), np.array([0.0, 0, 1]), scale_known=False), np.array([0.0, 0, 2.0])
            )

    @settings(max_examples=200, deadline=None)
    @given(
        phi=st.floats(min_value=-np.pi + 1e-6, max_value=np.pi, exclude_min=False),
        ax=st.floats(-1, 1), ay=st.floats(-1, 1), az=st.floats(-1, 1),
    )
    def test_recovers_angle_property(self, phi, ax, ay, az):
        v = np.array([ax, ay, az])
        n = np.linalg.norm(v)
        if n < 1e-3:
            return
        axis = v / n
        axis = axis / np.linalg.norm(axis)  # tighten to unit within 1e-12
        ja = joint_angle_from_rotation(
            RigidMotion(rotation_about_axis(axis, phi), np.array([0.0, 0, 1]), scale_known=False),
            axis,
        )
        if abs(phi) < 1e-6:
            assert abs(ja.angle) < 1e-6
        elif abs(abs(phi) - np.pi) < 1e-9:
            assert abs(ja.angle) == pytest.approx(np.pi, abs=1e-9)
        else:
            assert ja.angle == pytest.approx(phi, abs=1e-9)


class TestAccumulate:
    def test_prefix_sum(self):
        traj = accumulate(np.radians([[1.0], [2.0], [-0.5]]))
        assert np.allclose(np.degrees(traj.angles[:, 0]), [0.0, 1.0, 3.0, 2.5], atol=1e-12)

    def test_all_zero(self):
        traj = accumulate(np.zeros((5, 2)))
        assert np.allclose(traj.angles, 0.0)
        assert traj.n_frames == 6

    def test_wraps_before_summing(self):
        traj = accumulate(np.array([[2 * np.pi + 0.1]]))
        assert traj.angles[1, 0] == pytest.approx(0.1, abs=1e-12)

    def test_confidence_running_minimum(self):
        traj = accumulate(np.zeros((3, 1)), confidences=np.array([[0.9], [0.5], [0.8]]))
        assert np.allclose(traj.confidence[:, 0], [1.0, 0.9, 0.5, 0.5])

    @settings(max_examples=50, deadline=None)
    @given(na=st.integers(1, 5), nb=st.integers(1, 5), d=st.integers(1, 3), seed=st.integers(0, 1000))
    def test_concatenation_associativity(self, na, nb, d, seed):
        rng = np.random.default_rng(seed)
        a = rng.uniform(-1, 1, size=(na, d))
        b = rng.uniform(-1, 1, size=(nb, d))
        whole = accumulate(np.concatenate([a, b]))
        pa, pb = accumulate(a), accumulate(b)
        assert np.allclose(whole.angles[-1], pa.angles[-1] + pb.angles[-1], atol=1e-12)


def two_joint_chain() -> KinematicChain:
    return KinematicChain(
        (
            Joint(np.array([0.0, 0, 1]), np.array([0.0, 0, 0.2]), -1),
            Joint(np.array([0.0, 1, 0]), np.array([0.0, 0, 0.3]), 0),
        )
    )


class TestChain:
    def test_rejects_cyclic_parents(self):
        with pytest.raises(ValueError):
            KinematicChain((Joint(np.array([0.0, 0, 1]), np.zeros(3), 0),))

    def test_rejects_non_unit_axis(self):
        with pytest.raises(ValueError):
            Joint(np.array([0.0, 0, 2.0]), np.zeros(3), -1)

    def test_link_transform_rotates_about_origin(self):
        chain = two_joint_chain()
        t = chain.link_transform(np.array([np.pi / 2, 0.0]), 0)
        # joint origin itself is fixed
        assert np.allclose(t @ np.array([0, 0, 0, 1.0]), [0, 0, 0.2, 1.0], atol=1e-12)
        # +90 deg about z maps local +x to world +y
        assert np.allclose((t @ np.array([1, 0, 0, 1.0]))[:3], [0, 1, 0.2], atol=1e-12)

    def test_round_trip_dict(self):
        chain = two_joint_chain()
        again = KinematicChain.from_dict(chain.to_dict())
        for a, b in zip(chain.joints, again.joints):
            assert np.allclose(a.axis, b.axis) and np.allclose(a.origin, b.origin) and a.parent == b.parent

    def test_chain_pair_motions_match_fk(self):
        chain = two_joint_chain()
        cam = FramePose(rotation_about_axis(np.array([1.0, 0, 0]), 0.3), np.array([0.0, -1.0, 0.4]),
                        "camera", "world")
        base = np.array([0.2, -0.4])
        deltas = np.array([0.07, -0.12])
        motions = chain_pair_motions(chain, cam, base, deltas)
        wc = cam.inverse().matrix()
        cw = cam.matrix()
        for j in range(2):
            t0 = chain.link_transform(base, j)
            t1 = chain.link_transform(base + deltas, j)
            expected = wc @ t1 @ np.linalg.inv(t0) @ cw
            assert np.allclose(motions[j].matrix(), expected, atol=1e-10)


class TestPairJointAngles:
    def test_recovers_deltas_from_exact_motions(self):
        chain = two_joint_chain()
        cam = FramePose(rotation_about_axis(np.array([1.0, 0, 0]), -0.4), np.array([0.2, -1.2, 0.5]),
                        "camera", "world")
        base = np.array([0.3, 0.1])
        deltas = np.array([0.11, -0.07])
        motions = chain_pair_motions(chain, cam, base, deltas)
        rec, misalign = pair_joint_angles(list(motions), chain, cam, base)
        assert np.allclose(rec, deltas, atol=1e-10)
        assert misalign.max() < 1e-9

    def test_missing_motion_gets_zero(self):
        chain = two_joint_chain()
        cam = FramePose.identity("camera", "world")
        rec, misalign = pair_joint_angles([None, None], chain, cam, np.zeros(2))
        assert np.allclose(rec, 0.0)
        assert np.allclose(misalign, 1.0)


class TestWrap:
    @settings(max_examples=100, deadline=None)
    @given(st.floats(-50, 50))
    def test_range(self, a):
        w = wrap_angle(a)
        assert -np.pi < w <= np.pi
        assert abs((a - w) % (2 * np.pi)) < 1e-9 or abs((a - w) % (2 * np.pi) - 2 * np.pi) < 1e-9

import math
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st
from PIL import Image
from scipy.spatial.transform import Rotation

from fragrecon.camera import (Fbv, Frame, Intrinsics, KeyframeMode, Pose, SequenceFormatError,
                              assemble_fragments, compute_fbv, frustum_corners, ingest_sequence,
                              read_depth_png, read_intrinsics, read_trajectory, relative_motion,
                              select_keyframe, write_depth_png, write_intrinsics, write_trajectory)


def rz(deg):
    return Rotation.from_euler("z", deg, degrees=True).as_matrix()


def pose_with(dt, dr_deg):
    return Pose(Rotation.from_euler("y", dr_deg, degrees=True).as_matrix(), (dt, 0.0, 0.0))


def frame_at(pose, intr=None, index=0):
    intr = intr or Intrinsics.from_fov(8, 6, 90)
    return Frame(index, pose, intr, np.zeros((intr.height, intr.width)))


poses_st = st.builds(
    lambda q, t: Pose.from_quaternion(q / np.linalg.norm(q), t),
    st.lists(st.floats(-1, 1), min_size=4, max_size=4).map(np.array).filter(lambda q: np.linalg.norm(q) > 0.1),
    st.lists(st.floats(-5, 5), min_size=3, max_size=3),
)


class TestIntrinsicsAndPose:
    def test_from_fov_centres_principal_point(self):
        k = Intrinsics.from_fov(640, 480, 90)
        assert k.fx == pytest.approx(320.0)
        assert (k.cx, k.cy) == (320.0, 240.0)

    def test_rejects_bad_values(self):
        with pytest.raises(ValueError):
            Intrinsics(0, 1, 1, 1, 4, 4)
        with pytest.raises(ValueError):
            Intrinsics(1, 1, 5, 1, 4, 4)

    def test_scaled_divides_focal_and_centre(self):
        k = Intrinsics(500, 400, 320, 240, 640, 480).scaled(16)
        assert (k.fx, k.fy, k.cx, k.cy, k.width, k.height) == (31.25, 25.0, 20.0, 15.0, 40, 30)

    def test_pose_rejects_non_rotation(self):
        with pytest.raises(ValueError):
            Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
        with pytest.raises(ValueError):
            Pose(np.eye(3) * 1.01, np.zeros(3))

    def test_identity_quaternion_is_identity(self):
        assert np.array_equal(Pose.from_quaternion((0, 0, 0, 1), (0, 0, 0)).rotation, np.eye(3))

    def test_look_at_points_z_at_target_and_y_down(self):
        p = Pose.look_at((2, 0, 1), (0, 0, 1))
        assert np.allclose(p.rotation[:, 2], (-1, 0, 0))
        assert np.allclose(p.rotation[:, 1], (0, 0, -1))
        assert np.allclose(p.world_to_camera(np.array([[0.0, 0.0, 1.0]])), [[0, 0, 2]])

    @given(poses_st)
    def test_inverse_round_trip(self, p):
        pts = np.array([[0.1, -2.0, 3.0], [1.0, 1.0, 1.0]])
        assert np.allclose(p.inverse().apply(p.apply(pts)), pts, atol=1e-9)
        assert np.allclose(p.world_to_camera(p.apply(pts)), pts, atol=1e-9)


class TestRelativeMotion:
    def test_same_pose(self):
        p = Pose(rz(30), (1, 2, 3))
        assert relative_motion(p, p) == pytest.approx((0.0, 0.0), abs=1e-9)

    def test_pure_translation(self):
        assert relative_motion(Pose.identity(), Pose(np.eye(3), (0.3, 0, 0))) == pytest.approx((0.3, 0.0))

    def test_quarter_turn(self):
        assert relative_motion(Pose.identity(), Pose(rz(90), np.zeros(3))) == pytest.approx((0.0, 90.0))

    @given(poses_st, poses_st)
    def test_symmetric(self, a, b):
        assert relative_motion(a, b) == pytest.approx(relative_motion(b, a), abs=1e-6)

    @given(poses_st, poses_st)
    def test_angle_range(self, a, b):
        _, r = relative_motion(a, b)
        assert 0.0 <= r <= 180.0


class TestKeyframes:
    def test_both_above(self):
        assert select_keyframe(Pose.identity(), pose_with(0.15, 20))

    def test_both_below(self):
        for mode in KeyframeMode:
            assert not select_keyframe(Pose.identity(), pose_with(0.05, 5), mode=mode)

    def test_translation_only(self):
        p = pose_with(0.15, 5)
        assert not select_keyframe(Pose.identity(), p, mode=KeyframeMode.CONJUNCTION)
        assert select_keyframe(Pose.identity(), p, mode=KeyframeMode.DISJUNCTION)

    def test_default_is_conjunction(self):
        assert not select_keyframe(Pose.identity(), pose_with(0.15, 5))

    def test_thresholds_must_be_positive(self):
        with pytest.raises(ValueError):
            select_keyframe(Pose.identity(), Pose.identity(), t_max=0)

    @given(st.floats(0, 1), st.floats(0, 60), st.floats(0, 1), st.floats(0, 60), st.sampled_from(list(KeyframeMode)))
    def test_monotone(self, dt, dr, ddt, ddr, mode):
        before = select_keyframe(Pose.identity(), pose_with(dt, dr), mode=mode)
        after = select_keyframe(Pose.identity(), pose_with(dt + ddt, dr + ddr), mode=mode)
        assert not (before and not after)


class TestFbv:
    def test_single_forward_camera(self):
        fbv = compute_fbv([frame_at(Pose.identity())], d_max=3.0, coarse_voxel_size=0.16)
        assert fbv.side_length == pytest.approx(6.08)
        assert np.all(fbv.contains(np.array([[-3, -3, 0], [3, 3, 3]])))
        mc = np.asarray(fbv.min_corner) / 0.16
        assert np.allclose(mc, np.round(mc))

    def test_duplicate_frames(self):
        f = frame_at(Pose(rz(20), (0.3, 0.1, 0)))
        assert compute_fbv([f]) == compute_fbv([f, f])

    def test_translated_pair_not_smaller(self):
        a = frame_at(Pose.identity())
        b = frame_at(Pose(np.eye(3), (1, 0, 0)))
        assert compute_fbv([a, b]).side_length >= compute_fbv([a]).side_length

    @given(st.lists(poses_st, min_size=1, max_size=4), st.floats(0.5, 4.0))
    def test_contains_all_corners(self, poses, d_max):
        frames = [frame_at(p) for p in poses]
        fbv = compute_fbv(frames, d_max)
        corners = np.vstack([frustum_corners(f.pose, f.intrinsics, d_max) for f in frames])
        assert np.all(fbv.contains(corners, eps=1e-7))
        assert fbv.side_length / 0.16 == pytest.approx(round(fbv.side_length / 0.16))

    def test_fbv_validation(self):
        with pytest.raises(ValueError):
            Fbv((0, 0, 0), 0.0)


class TestIngestion:
    def _write_seq(self, tmp_path, n=3):
        intr = Intrinsics.from_fov(8, 6, 90)
        poses = [(i, Pose(rz(10 * i), (0.1 * i, 0, 0))) for i in range(n)]
        write_trajectory(tmp_path / "traj.txt", poses)
        write_intrinsics(tmp_path / "intr.txt", intr)
        img = tmp_path / "img"
        img.mkdir()
        for i in range(n):
            write_depth_png(img / f"frame{i:04d}.png", np.full((6, 8), 2.0 + i))
        return intr, poses, img

    def test_three_frames_in_order(self, tmp_path):
        intr, poses, img = self._write_seq(tmp_path)
        frames = list(ingest_sequence(tmp_path / "traj.txt", tmp_path / "intr.txt", img))
        assert [f.index for f in frames] == [0, 1, 2]
        assert frames[2].depth[0, 0] == pytest.approx(4.0)
        assert np.allclose(frames[1].pose.rotation, poses[1][1].rotation, atol=1e-8)
        assert frames[0].intrinsics == read_intrinsics(tmp_path / "intr.txt")

    def test_depth_scale(self, tmp_path):
        Image.fromarray(np.full((2, 2), 2000, dtype=np.uint16)).save(tmp_path / "d.png")
        assert read_depth_png(tmp_path / "d.png")[0, 0] == 2.0

    def test_missing_pose_names_index(self, tmp_path):
        _, _, img = self._write_seq(tmp_path)
        write_depth_png(img / "frame0007.png", np.ones((6, 8)))
        with pytest.raises(SequenceFormatError, match="7"):
            list(ingest_sequence(tmp_path / "traj.txt", tmp_path / "intr.txt", img))

    def test_malformed_line_number(self, tmp_path):
        p = tmp_path / "t.txt"
        p.write_text("0 0 0 0 0 0 0 1\n1 0 0 0 0 0\n")
        with pytest.raises(SequenceFormatError, match="line 2"):
            read_trajectory(p)

    def test_quaternion_tolerance(self, tmp_path):
        p = tmp_path / "t.txt"
        p.write_text("0 0 0 0 0 0 0 1.0005\n")
        assert np.allclose(read_trajectory(p)[0].rotation, np.eye(3))
        p.write_text("0 0 0 0 0 0 0 1.01\n")
        with pytest.raises(SequenceFormatError, match="line 1"):
            read_trajectory(p)

    def test_eight_bit_image_is_grayscale(self, tmp_path):
        intr, _, img = self._write_seq(tmp_path, 1)
        (img / "frame0000.png").unlink()
        Image.fromarray(np.full((6, 8), 255, dtype=np.uint8)).save(img / "frame0000.png")
        (f,) = ingest_sequence(tmp_path / "traj.txt", tmp_path / "intr.txt", img)
        assert f.depth is None and f.image.max() == 1.0


def orbit_frames(n, every, r_max=15.0):
    """Frames on a circle where exactly every ``every``-th frame clears both thresholds."""
    step = r_max / (every - 0.5)
    intr = Intrinsics.from_fov(8, 6, 60)
    out = []
    for i in range(n):
        a = math.radians(i * step)
        out.append(frame_at(Pose.look_at((2 * math.cos(a), 2 * math.sin(a), 0), (0, 0, 0)), intr, i))
    return out


class TestFragments:
    def test_every_fifth_frame(self):
        frames = orbit_frames(100, 5)
        frags = list(assemble_fragments(frames, n_views=9))
        # key frames are simulated independently of the grouping code
        keys, last = [], None
        for f in frames:
            if last is None or select_keyframe(last.pose, f.pose):
                keys.append(f.index)
                last = f
        assert keys[:4] == [0, 5, 10, 15]
        assert frags[0].frame_indices == keys[:9]
        assert [i for fr in frags for i in fr.frame_indices] == keys[: 9 * (len(keys) // 9)] + (
            keys[9 * (len(keys) // 9):] if len(keys) % 9 >= 2 else [])

    def test_static_camera_warns(self):
        frames = [frame_at(Pose.identity(), index=i) for i in range(10)]
        with pytest.warns(RuntimeWarning):
            assert list(assemble_fragments(frames)) == []

    def test_exactly_n_key_frames(self):
        frames = orbit_frames(41, 5)  # key frames 0,5,...,40 -> 9
        assert len(list(assemble_fragments(frames, n_views=9))) == 1

    def test_trailing_short_fragment(self):
        frames = orbit_frames(56, 5)  # 12 key frames
        frags = list(assemble_fragments(frames, n_views=9))
        assert [len(f.frames) for f in frags] == [9, 3]

    def test_n_must_be_two(self):
        with pytest.raises(ValueError):
            list(assemble_fragments([], n_views=1))

    @given(st.integers(2, 6), st.integers(20, 60), st.integers(2, 7))
    def test_indices_increasing_and_disjoint(self, every, n, n_views):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            frags = list(assemble_fragments(orbit_frames(n, every), n_views=n_views))
        idx = [i for f in frags for i in f.frame_indices]
        assert idx == sorted(set(idx))
        for f in frags:
            assert 2 <= len(f.frames) <= n_views
            for fr in f.frames:
                assert np.all(f.fbv.contains(frustum_corners(fr.pose, fr.intrinsics, 3.0), eps=1e-7))

"""Dataset ingestion, cropping/sampling, and stamped-cloud assembly tests."""

import numpy as np
import pytest

from motrack import data, geom
from motrack.geom import Box3D


KITTI_ROW = "0 1 Car 0 0 0 0 0 0 0 1.5 1.6 3.9 2.0 1.5 10.0 0.1"


def test_parse_kitti_single_row():
    (tr,) = data.parse_kitti_labels(KITTI_ROW)
    assert tr.instance_id == "1" and tr.category == "Car"
    frame, box = tr.entries[0]
    assert frame == 0
    np.testing.assert_allclose(box.size, [1.6, 3.9, 1.5])
    # camera (x right, y down, z fwd) -> world (z up): (2, 1.5, 10) bottom center
    np.testing.assert_allclose(box.center, [10.0, -2.0, -1.5 + 0.75])
    assert abs(geom.wrap_angle(box.yaw - (np.pi - 0.1))) < 1e-12


def test_parse_kitti_interleaved_tracks_sorted():
    text = "\n".join(
        [
            "2 7 Car 0 0 0 0 0 0 0 1.5 1.6 3.9 0.0 0.0 5.0 0.0",
            "0 3 Car 0 0 0 0 0 0 0 1.4 1.7 4.0 1.0 0.0 6.0 0.0",
            "0 7 Car 0 0 0 0 0 0 0 1.5 1.6 3.9 0.0 0.0 4.0 0.0",
            "1 3 Car 0 0 0 0 0 0 0 1.4 1.7 4.0 1.0 0.0 7.0 0.0",
        ]
    )
    tracklets = {t.instance_id: t for t in data.parse_kitti_labels(text)}
    assert set(tracklets) == {"3", "7"}
    assert tracklets["7"].frame_ids() == [0, 2]
    assert tracklets["3"].frame_ids() == [0, 1]


def test_parse_kitti_bad_field_count():
    bad = " ".join(KITTI_ROW.split()[:16])
    with pytest.raises(ValueError, match="line 1"):
        data.parse_kitti_labels(bad)


def test_parse_kitti_skips_dontcare_and_warns_unknown():
    text = "\n".join(
        [
            "0 -1 DontCare 0 0 0 0 0 0 0 1 1 1 0 0 5 0",
            "0 2 Spaceship 0 0 0 0 0 0 0 1 1 1 0 0 5 0",
            KITTI_ROW,
        ]
    )
    with pytest.warns(UserWarning, match="Spaceship"):
        tracklets = data.parse_kitti_labels(text)
    assert len(tracklets) == 1


def test_parse_kitti_heading_matches_camera_convention():
    """Parsed yaw must send the length axis along the KITTI heading direction.

    In camera coordinates (x right, y down, z forward) an object with
    rotation_y = ry heads along (cos ry, 0, -sin ry). The world mapping is
    (x, y, z)_world = (z, -x, -y)_cam.
    """
    rng = np.random.default_rng(15)
    for ry in rng.uniform(-np.pi, np.pi, 50):
        row = f"0 1 Car 0 0 0 0 0 0 0 1.5 1.6 3.9 0.0 0.0 10.0 {ry}"
        (tr,) = data.parse_kitti_labels(row)
        box = tr.entries[0][1]
        heading_world = geom.rot_z(box.yaw) @ np.array([0.0, 1.0, 0.0])
        h_cam = np.array([np.cos(ry), 0.0, -np.sin(ry)])
        expect = np.array([h_cam[2], -h_cam[0], -h_cam[1]])
        np.testing.assert_allclose(heading_world, expect, atol=1e-9)


def test_point_bin_round_trip():
    raw = np.array(
        [[1, 2, 3, 0.5], [4, 5, 6, 0.1]], dtype="<f4"
    ).tobytes()
    fr = data.read_point_bin(raw)
    assert len(fr) == 2
    np.testing.assert_allclose(fr.points, [[1, 2, 3], [4, 5, 6]])
    assert data.read_point_bin(b"").points.shape == (0, 3)
    with pytest.raises(ValueError):
        data.read_point_bin(b"x" * 17)
    again = data.read_point_bin(data.write_point_bin(fr.points))
    np.testing.assert_array_equal(again.points, fr.points)


def test_crop_subregion_membership_consistency():
    rng = np.random.default_rng(10)
    box = Box3D([1, 2, 0], 0.7, [2, 4, 1.5])
    frame = data.Frame(0, rng.uniform(-5, 5, (500, 3)))
    crop = data.crop_subregion(frame, box, margin=2.0)
    assert np.all(geom.points_in_box(crop.points, data.enlarge_box(box, 2.0)))
    # margin 0 keeps exactly the in-box survivors
    crop0 = data.crop_subregion(frame, box, margin=0.0)
    assert len(crop0) == int(geom.points_in_box(frame.points, box).sum())


def test_crop_subregion_point_outside_face_retained_with_margin():
    box = Box3D([0, 0, 0], 0.0, [2, 2, 2])
    p = data.Frame(0, np.array([[1.9, 0.0, 0.0]]))  # 0.9 m beyond the +x face
    assert len(data.crop_subregion(p, box, margin=0.0)) == 0
    assert len(data.crop_subregion(p, box, margin=2.0)) == 1


def test_resample_counts_and_support():
    rng = np.random.default_rng(11)
    big = data.Frame(0, rng.normal(size=(2000, 3)))
    out = data.resample(big, 1024, np.random.default_rng(0))
    assert len(out) == 1024
    assert len(np.unique(out.points, axis=0)) == 1024  # without replacement

    small = data.Frame(0, rng.normal(size=(10, 3)))
    out = data.resample(small, 1024, np.random.default_rng(0))
    assert len(out) == 1024
    support = set(map(tuple, small.points))
    assert set(map(tuple, out.points)) <= support


def test_resample_deterministic_and_degenerate():
    frame = data.Frame(0, np.random.default_rng(12).normal(size=(50, 3)))
    a = data.resample(frame, 32, np.random.default_rng(7))
    b = data.resample(frame, 32, np.random.default_rng(7))
    np.testing.assert_array_equal(a.points, b.points)

    empty = data.Frame(0, np.zeros((0, 3)))
    out = data.resample(empty, 8, np.random.default_rng(0), sentinel=[1, 2, 3])
    assert out.degenerate
    np.testing.assert_array_equal(out.points, np.tile([1.0, 2.0, 3.0], (8, 1)))


def test_build_stamped_prior_and_box_aware():
    """Hand-built fixture covering every prior-targetness case."""
    box = Box3D([0, 0, 0], 0.0, [2, 2, 2])
    prev = data.Frame(0, np.array([[0.0, 0.0, 0.0], [5.0, 0.0, 0.0]]))  # in, out
    cur = data.Frame(1, np.array([[0.3, 0.1, 0.0]]))
    sc = data.build_stamped(prev, cur, box)
    sc.validate()
    np.testing.assert_array_equal(sc.time, [0, 0, 1])
    np.testing.assert_array_equal(sc.prior, [1.0, 0.0, 0.5])
    # previous points carry distances to the prior box keypoints
    np.testing.assert_allclose(sc.box_aware[0, :8], np.sqrt(3.0))
    assert sc.box_aware[0, 8] == 0.0
    d_out = geom.distance_map(prev.points[1:2], box)
    np.testing.assert_allclose(sc.box_aware[1], d_out[0])
    assert d_out[0, 8] == 5.0
    # current points are zero-padded
    np.testing.assert_array_equal(sc.box_aware[2], np.zeros(9))
    feats = sc.as_features()
    assert feats.shape == (3, 14)
    np.testing.assert_array_equal(feats[:, :3], sc.points)
    np.testing.assert_array_equal(feats[:, 3], sc.time)
    np.testing.assert_array_equal(feats[:, 4], sc.prior)


def test_perturb_box_bounds_and_size():
    class ZeroRng:
        def uniform(self, lo, hi, size=None):
            return np.zeros(size) if size else 0.0

    base = Box3D([1, 2, 3], 0.5, [2, 4, 1.5])
    same = data.perturb_box(base, ZeroRng())
    np.testing.assert_allclose(same.center, base.center)
    assert same.yaw == base.yaw

    rng = np.random.default_rng(13)
    offs, dyaws = [], []
    for _ in range(10_000):
        p = data.perturb_box(base, rng)
        offs.append(p.center - base.center)
        dyaws.append(geom.wrap_angle(p.yaw - base.yaw))
        assert np.array_equal(p.size, base.size)
    offs = np.vstack(offs)
    assert np.all(np.abs(offs[:, :2]) <= 0.3) and np.all(np.abs(offs[:, 2]) <= 0.1)
    assert np.max(np.abs(dyaws)) <= np.deg2rad(5.0)
    # draws actually reach most of the declared range
    assert np.max(np.abs(offs[:, :2])) > 0.29


def test_make_training_sample_counts():
    rng = np.random.default_rng(14)
    gt_prev = Box3D([0, 0, 0], 0.2, [2, 4, 1.5])
    gt_cur = Box3D([0.4, 0.1, 0], 0.25, [2, 4, 1.5])
    prev = data.Frame(0, rng.uniform(-4, 4, (300, 3)))
    cur = data.Frame(1, rng.uniform(-4, 4, (300, 3)))
    s = data.make_training_sample(prev, cur, gt_prev, gt_cur, rng, n_points=256)
    assert len(s.prev) == 256 and len(s.cur) == 256
    assert not s.is_pseudo
    assert np.all(
        geom.points_in_box(s.prev.points, data.enlarge_box(s.prev_box_input, 2.0))
    )


def test_split_breakpoint():
    def seq(i):
        box = Box3D([i, 0, 0], 0.0, [1, 2, 1])
        tr = data.Tracklet("target", "Car", [(0, box), (1, box.copy())])
        return data.TrackedSequence(str(i), i, [data.Frame(0, np.zeros((1, 3)))], tr)

    seqs = [seq(i) for i in range(5)]
    ds = data.split_breakpoint(seqs, 2)
    assert len(ds.labeled) == 3 and len(ds.unlabeled) == 2
    assert all(isinstance(u, data.UnlabeledSequence) for u in ds.unlabeled)
    np.testing.assert_allclose(ds.unlabeled[0].first_box.center, [3, 0, 0])

    assert len(data.split_breakpoint(seqs, 4).labeled) == 5
    with pytest.raises(ValueError):
        data.split_breakpoint(seqs, -1)
    with pytest.raises(ValueError):
        data.split_breakpoint(seqs, 9)


def test_tracklet_invariants():
    box = Box3D([0, 0, 0], 0.0, [1, 2, 1])
    with pytest.raises(ValueError, match="not increasing"):
        data.Tracklet("x", "Car", [(1, box), (1, box.copy())])
    other = Box3D([0, 0, 0], 0.0, [9, 9, 9])
    with pytest.raises(ValueError, match="size varies"):
        data.Tracklet("x", "Car", [(0, box), (1, other)])


def test_jsonl_round_trip(tmp_path):
    box0 = Box3D([1.5, -2.0, 0.75], 0.3, [1.6, 3.9, 1.5])
    box1 = geom.transform_box(box0, geom.RTM4(0.1, 0.9, 0.0, 0.02))
    tr = data.Tracklet("target", "Car", [(0, box0), (1, box1)])
    rows = data.tracklet_rows("0004", tr)
    path = tmp_path / "t.jsonl"
    data.write_jsonl(path, rows)
    back = data.rows_to_tracklets(data.read_jsonl(path))
    tr2 = back[("0004", "target")]
    assert tr2.frame_ids() == [0, 1]
    for f in (0, 1):
        np.testing.assert_array_equal(tr2.box_at(f).center, tr.box_at(f).center)
        assert tr2.box_at(f).yaw == tr.box_at(f).yaw
        np.testing.assert_array_equal(tr2.box_at(f).size, tr.box_at(f).size)


def test_manifest_round_trip(tmp_path):
    path = tmp_path / "manifest.txt"
    data.write_manifest(path, {"n_sequences": 3, "seed": 42, "note": "a b c"})
    back = data.read_manifest(path)
    assert back == {"n_sequences": "3", "seed": "42", "note": "a b c"}

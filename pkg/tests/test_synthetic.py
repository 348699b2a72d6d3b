import numpy as np
import pytest

from pillarseg.dataset_io import Pose, SequenceLayout
from pillarseg.groundtruth import dense_gt, sparse_gt
from pillarseg.synthetic import (
    TOY_FAN,
    Primitive,
    SceneSpec,
    random_scene,
    render_scan,
    render_sequence,
    straight_trajectory,
    street_scene,
    yaw_pose,
)
from helpers import TOY_GRID


class TestPrimitive:
    def test_plane_hit(self):
        p = Primitive("plane", 4, yaw_pose(0, 0, -1.7), (10, 10))
        t = p.intersect(np.zeros(3), np.array([[0, 0, -1.0], [0, 0, 1.0]]))
        np.testing.assert_allclose(t, [1.7, np.inf])

    def test_box_hit_near_face(self):
        b = Primitive("box", 0, yaw_pose(5, 0, 0), (2, 2, 2))
        np.testing.assert_allclose(b.intersect(np.zeros(3), np.array([[1.0, 0, 0]])), [4.0])

    def test_invalid(self):
        with pytest.raises(ValueError):
            Primitive("sphere", 0, Pose(), (1,))
        with pytest.raises(ValueError):
            Primitive("box", 0, Pose(), (1, 1))

    def test_moving(self):
        b = Primitive("box", 0, yaw_pose(5, 0, 0), (2, 2, 2), moving=True, velocity=(1.0, 0, 0))
        np.testing.assert_allclose(b.intersect(np.zeros(3), np.array([[1.0, 0, 0]]), time=2.0), [6.0])


class TestRender:
    @pytest.mark.parametrize("make", [lambda: street_scene(0, **TOY_FAN), lambda: random_scene(3, **TOY_FAN)])
    def test_labels_match_geometry(self, make):
        scene = make()
        cloud, lab = render_scan(scene)
        assert len(cloud) > 1000
        for k, p in enumerate(cloud.xyz):
            if k % 37:
                continue
            owners = [q.class_id for q in scene.primitives if q.contains(p[None], tol=2e-4)[0]]
            assert lab.class_id[k] in owners

    def test_deterministic(self):
        a = render_scan(street_scene(5, **TOY_FAN))
        b = render_scan(street_scene(5, **TOY_FAN))
        np.testing.assert_array_equal(a[0].points, b[0].points)
        np.testing.assert_array_equal(a[1].class_id, b[1].class_id)

    def test_sensor_frame(self):
        scene = SceneSpec((Primitive("plane", 4, yaw_pose(0, 0, -1.7), (100, 100)),), azimuth_count=8, elevation_count=1)
        a, _ = render_scan(scene)
        b, _ = render_scan(scene, yaw_pose(3.0, 1.0, 0.0))
        np.testing.assert_allclose(a.points, b.points, atol=1e-5)

    def test_street_has_many_classes(self):
        _, lab = render_scan(street_scene(0, **TOY_FAN))
        assert len(np.unique(lab.class_id)) >= 8


class TestSequence:
    def test_dense_exceeds_sparse(self):
        scene = street_scene(1, half_length=12.0, **TOY_FAN)
        seq = render_sequence(scene, straight_trajectory(2, step=1.0))
        d = dense_gt(seq.clouds, seq.labels, seq.poses, 0, TOY_GRID)
        s = sparse_gt(seq.clouds[0], seq.labels[0], TOY_GRID)
        assert d.labeled.sum() > s.labeled.sum()

    def test_moving_primitive_flags(self):
        prims = (
            Primitive("plane", 4, yaw_pose(0, 0, -1.7), (40, 40)),
            Primitive("box", 0, yaw_pose(4, 0, -1.0), (2, 2, 1.4), moving=True, velocity=(0.5, 0, 0)),
        )
        seq = render_sequence(SceneSpec(prims, **TOY_FAN), straight_trajectory(2))
        lab = seq.labels[1]
        assert lab.moving[lab.class_id == 0].all() and (lab.class_id == 0).any()
        assert not lab.moving[lab.class_id == 4].any()
        # moving points from the neighbour scan do not enter the dense grid
        d = dense_gt(seq.clouds, seq.labels, seq.poses, 0, TOY_GRID)
        s0 = sparse_gt(seq.clouds[0], seq.labels[0], TOY_GRID)
        assert (d.class_id == 0).sum() == (s0.class_id == 0).sum()

    def test_write(self, tmp_path):
        seq = render_sequence(street_scene(2, **TOY_FAN), straight_trajectory(2), root=tmp_path / "00")
        lay = SequenceLayout(tmp_path / "00")
        np.testing.assert_array_equal(lay.read_scan(1).points, seq.clouds[1].points)
        np.testing.assert_array_equal(lay.read_labels(1).class_id, seq.labels[1].class_id)

    def test_empty_trajectory(self):
        with pytest.raises(ValueError):
            render_sequence(street_scene(0), [])

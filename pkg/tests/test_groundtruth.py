import numpy as np
import pytest

from oracles import loop_argmax, loop_counts
from pillarseg.dataset_io import LabelSet, PointCloud, Pose
from pillarseg.errors import PairMismatch
from pillarseg.grid import default_spec
from pillarseg.groundtruth import (
    NeighborConfig,
    aggregate_scans,
    count_cells,
    default_gt_weights,
    dense_gt,
    select_neighbors,
    sparse_gt,
    weighted_argmax,
)
from helpers import TOY_GRID, random_cloud

ROAD, VEHICLE = 4, 0


def pts(xyz):
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    return PointCloud(np.hstack([xyz, np.zeros((len(xyz), 1))]))


def labs(cls, moving=None):
    cls = np.asarray(cls, dtype=np.uint8)
    return LabelSet(cls, np.zeros(len(cls), dtype=bool) if moving is None else np.asarray(moving))


def line_poses(n, step=1.0):
    return [Pose(translation=[k * step, 0, 0]) for k in range(n)]


class TestCounts:
    spec = default_spec()

    def test_single_road_point(self):
        c = count_cells(pts([0, 0, 0]), labs([ROAD]), self.spec).counts
        assert c[500, 250, ROAD] == 1 and c.sum() == 1

    def test_unlabeled_not_counted(self):
        assert count_cells(pts([0, 0, 0]), labs([255]), self.spec).counts.sum() == 0

    def test_mixed(self):
        c = count_cells(pts([[0.01, 0.01, 0]] * 5), labs([0, 0, 4, 4, 4]), self.spec).counts
        assert c[500, 250, VEHICLE] == 2 and c[500, 250, ROAD] == 3

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(0)
        cloud, lab = random_cloud(rng, 3000, TOY_GRID, margin=0.0)
        got = count_cells(cloud, lab, TOY_GRID).counts
        np.testing.assert_array_equal(got, loop_counts(cloud.xyz, lab.class_id, TOY_GRID.lower, 0.2, TOY_GRID.shape2d))

    def test_pair_mismatch(self):
        with pytest.raises(PairMismatch):
            count_cells(pts([[0, 0, 0]] * 2), labs([1]), self.spec)


class TestWeightedArgmax:
    def _cell(self, **kv):
        c = np.zeros((1, 1, 12), dtype=np.int64)
        for k, v in kv.items():
            c[0, 0, {"road": ROAD, "vehicle": VEHICLE}[k]] = v
        return c

    def test_vehicle_outweighs_road(self):
        assert weighted_argmax(self._cell(road=4, vehicle=1)).class_id[0, 0] == VEHICLE

    def test_tie_smallest_id(self):
        assert weighted_argmax(self._cell(road=5, vehicle=1)).class_id[0, 0] == VEHICLE

    def test_empty(self):
        assert weighted_argmax(self._cell()).class_id[0, 0] == 255

    def test_zero_weight_class_ignored(self):
        w = np.ones(12)
        w[ROAD] = 0.0
        assert weighted_argmax(self._cell(road=9), w).class_id[0, 0] == 255

    def test_default_weights(self):
        w = default_gt_weights()
        assert w[VEHICLE] == 5 and w[ROAD] == 1 and w[1] == w[2] == w[3] == 5

    def test_bad_weights(self):
        with pytest.raises(ValueError):
            weighted_argmax(self._cell(road=1), np.ones(11))

    def test_random_vs_loop(self):
        rng = np.random.default_rng(1)
        counts = rng.integers(0, 4, (20, 10, 12))
        w = rng.integers(0, 3, 12).astype(float)
        np.testing.assert_array_equal(weighted_argmax(counts, w).class_id, loop_argmax(counts, w))


class TestSparse:
    spec = default_spec()

    def test_empty(self):
        g = sparse_gt(pts(np.zeros((0, 3))), labs([]), self.spec)
        assert (g.class_id == 255).all()

    def test_one_point(self):
        g = sparse_gt(pts([1.0, 2.0, 0.0]), labs([7]), self.spec)
        assert g.labeled.sum() == 1 and g.class_id[510, 270] == 7


class TestNeighbors:
    def test_forty_nearest(self):
        got = select_neighbors(line_poses(100), 50)
        assert got[0] == 50 and len(got) == 40
        dist = sorted(range(100), key=lambda j: (abs(j - 50), j))[:40]
        assert got == dist

    def test_distance_sort_oracle(self):
        poses = line_poses(100)
        got = select_neighbors(poses, 10)
        d = [abs(j - 10) for j in got]
        assert d == sorted(d)
        assert len(got) == 40

    def test_single(self):
        assert select_neighbors(line_poses(1), 0) == [0]

    def test_far_away(self):
        assert select_neighbors(line_poses(3, step=500.0), 1) == [1]

    def test_radius(self):
        got = select_neighbors(line_poses(10, step=3.0), 0, NeighborConfig(d=5.0))
        assert got == [0, 1, 2, 3]

    def test_along_track(self):
        poses = [Pose(translation=[0, 0, 0]), Pose(translation=[0, 50, 0]), Pose(translation=[12, 0, 0])]
        assert select_neighbors(poses, 0, NeighborConfig(d=5.0, metric="along_track")) == [0, 1]

    def test_bad_config(self):
        with pytest.raises(ValueError):
            NeighborConfig(d=0)


class TestDense:
    spec = TOY_GRID

    def test_identical_copies_equal_sparse(self):
        rng = np.random.default_rng(2)
        cloud, lab = random_cloud(rng, 800, self.spec, margin=0.0)
        K = 4
        g = dense_gt([cloud] * K, [lab] * K, line_poses(K, step=0.0), 0, self.spec)
        np.testing.assert_array_equal(g.class_id, sparse_gt(cloud, lab, self.spec).class_id)

    def test_moving_neighbor_filtered(self):
        a = (pts([[0.1, 0.1, 0.0]]), labs([ROAD]))
        b = (pts([[1.1, 0.1, 0.0]]), labs([VEHICLE], [True]))
        g = dense_gt([a[0], b[0]], [a[1], b[1]], line_poses(2, 0.0), 0, self.spec)
        np.testing.assert_array_equal(g.class_id, sparse_gt(*a, self.spec).class_id)

    def test_current_scan_keeps_moving(self):
        g = dense_gt([pts([[0.1, 0.1, 0.0]])], [labs([VEHICLE], [True])], line_poses(1), 0, self.spec)
        assert g.labeled.sum() == 1

    def test_disjoint_union(self):
        a = (pts([[0.1, 0.1, 0.0]]), labs([ROAD]))
        b = (pts([[1.1, 0.1, 0.0]]), labs([7]))
        g = dense_gt([a[0], b[0]], [a[1], b[1]], line_poses(2, 0.0), 0, self.spec).class_id
        sa, sb = sparse_gt(*a, self.spec).class_id, sparse_gt(*b, self.spec).class_id
        np.testing.assert_array_equal(g, np.where(sa != 255, sa, sb))

    def test_neighbors_transformed(self):
        # scan 1 sits 1 m further along x; its point at x=0.1 lands at x=1.1 in scan 0's frame
        a = (pts(np.zeros((0, 3))), labs([]))
        b = (pts([[0.1, 0.1, 0.0]]), labs([ROAD]))
        g = dense_gt([a[0], b[0]], [a[1], b[1]], line_poses(2, 1.0), 0, self.spec)
        i, j = np.argwhere(g.labeled)[0]
        assert (i, j) == (int((1.1 + 6.4) / 0.2), int((0.1 + 3.2) / 0.2))

    def test_dense_covers_sparse(self):
        rng = np.random.default_rng(3)
        clouds, labels = zip(*[random_cloud(rng, 400, self.spec, margin=0.0) for _ in range(3)])
        poses = line_poses(3, 0.5)
        d = dense_gt(list(clouds), list(labels), poses, 1, self.spec)
        s = sparse_gt(clouds[1], labels[1], self.spec)
        assert np.all(d.labeled[s.labeled])

    def test_aggregate_sizes(self):
        rng = np.random.default_rng(4)
        c0, l0 = random_cloud(rng, 50, self.spec)
        c1, l1 = random_cloud(rng, 60, self.spec)
        l1.moving[:10] = True
        cloud, lab = aggregate_scans([c0, c1], [l0, l1], line_poses(2), 0, [0, 1])
        assert len(cloud) == len(lab) == 100

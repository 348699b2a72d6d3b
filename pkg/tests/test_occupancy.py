import numpy as np
import pytest

from oracles import walk_cells
from pillarseg.dataset_io import PointCloud
from pillarseg.errors import DegenerateRay
from pillarseg.grid import GridSpec
from pillarseg.occupancy import (
    ObservabilityMap,
    _traverse_units,
    batch_traverse,
    observability_map,
    observed_mask,
    traverse_2d,
    traverse_3d,
    voxel_occupancy,
)

UNIT = GridSpec((0.0, 1.0), (0.0, 1.0), (0.0, 1.0), 0.1, 0.1)


def cloud(xyz):
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    return PointCloud(np.hstack([xyz, np.zeros((len(xyz), 1))]))


class TestTraverse2D:
    def test_along_x(self):
        assert traverse_2d((0.05, 0.05), (0.35, 0.05), UNIT) == [(0, 0), (1, 0), (2, 0)]

    def test_same_cell(self):
        assert traverse_2d((0.01, 0.01), (0.08, 0.09), UNIT) == []

    def test_endpoint_outside_clips(self):
        assert traverse_2d((0.75, 0.05), (3.0, 0.05), UNIT) == [(7, 0), (8, 0), (9, 0)]

    def test_origin_outside(self):
        assert traverse_2d((-1.0, 0.55), (0.25, 0.55), UNIT) == [(0, 5), (1, 5)]

    def test_fully_outside(self):
        assert traverse_2d((-1.0, -1.0), (-0.5, 2.0), UNIT) == []

    def test_degenerate(self):
        with pytest.raises(DegenerateRay):
            traverse_2d((0.3, 0.3), (0.3, 0.3), UNIT)

    def test_4_connected_and_matches_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            a, b = rng.uniform(-0.2, 1.2, 2), rng.uniform(-0.2, 1.2, 2)
            cells = traverse_2d(a, b, UNIT)
            for p, q in zip(cells, cells[1:]):
                assert abs(p[0] - q[0]) + abs(p[1] - q[1]) == 1
            want = walk_cells(a / 0.1, b / 0.1, (10, 10))
            end = tuple(np.floor(b / 0.1).astype(int))
            if want and want[-1] == end:
                want = want[:-1]
            assert cells == want


class TestTraverse3D:
    def test_diagonal_example(self):
        got = traverse_3d((0.05, 0.05, 0.05), (0.25, 0.15, 0.05), UNIT)
        assert got == [(0, 0, 0), (1, 0, 0), (1, 1, 0), (2, 1, 0)]

    def test_within_one_voxel(self):
        assert traverse_3d((0.01, 0.05, 0.05), (0.09, 0.05, 0.05), UNIT) == [(0, 0, 0)]

    def test_outside(self):
        assert traverse_3d((2, 2, 2), (3, 3, 3), UNIT) == []

    def test_tie_breaks_lower_axis_first(self):
        got = traverse_3d((0.05, 0.05, 0.05), (0.15, 0.15, 0.05), UNIT)
        assert got == [(0, 0, 0), (1, 0, 0), (1, 1, 0)]

    def test_6_connected(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            cells = traverse_3d(rng.uniform(0, 1, 3), rng.uniform(-0.5, 1.5, 3), UNIT)
            for p, q in zip(cells, cells[1:]):
                assert sum(abs(x - y) for x, y in zip(p, q)) == 1


class TestBatchTraverse:
    def test_matches_scalar(self):
        rng = np.random.default_rng(2)
        u0 = rng.uniform(-2, 12, (300, 3))
        u1 = rng.uniform(-2, 12, (300, 3))
        ray, cells, start, length = batch_traverse(u0, u1, (10, 10, 10))
        for r in range(300):
            got = [tuple(c) for c in cells[start[r] : start[r] + length[r]]]
            assert got == _traverse_units(u0[r], u1[r], (10, 10, 10)), r
            assert (ray[start[r] : start[r] + length[r]] == r).all()


class TestObservability:
    def test_empty(self):
        obs = observability_map(cloud(np.zeros((0, 3))), (0.05, 0.05, 0), UNIT)
        assert not obs.transmissions.any() and not obs.hits.any()

    def test_one_point(self):
        obs = observability_map(cloud([0.35, 0.05, 0.5]), (0.05, 0.05, 0.2), UNIT)
        np.testing.assert_array_equal(np.argwhere(obs.transmissions), [[0, 0], [1, 0], [2, 0]])
        assert obs.hits[3, 0] == 1 and obs.hits.sum() == 1

    def test_additivity(self):
        one = observability_map(cloud([0.35, 0.05, 0.5]), (0.05, 0.05, 0.2), UNIT)
        two = observability_map(cloud([[0.35, 0.05, 0.5]] * 2), (0.05, 0.05, 0.2), UNIT)
        np.testing.assert_array_equal(two.transmissions, 2 * one.transmissions)
        np.testing.assert_array_equal(two.hits, 2 * one.hits)

    def test_split_clouds_sum(self):
        rng = np.random.default_rng(3)
        pts = rng.uniform(0, 1, (500, 3))
        a = observability_map(cloud(pts[:200]), (0.5, 0.5, 0.5), UNIT)
        b = observability_map(cloud(pts[200:]), (0.5, 0.5, 0.5), UNIT)
        full = observability_map(cloud(pts), (0.5, 0.5, 0.5), UNIT)
        np.testing.assert_array_equal((a + b).transmissions, full.transmissions)
        np.testing.assert_array_equal((a + b).hits, full.hits)

    def test_vertical_point_skipped(self):
        obs = observability_map(cloud([0.5, 0.5, 0.9]), (0.5, 0.5, 0.1), UNIT)
        assert obs.skipped == 1 and not obs.hits.any()


class TestVoxelOccupancy:
    def test_prior_hit_and_ratio(self):
        pts = [[0.05, 0.05, 0.05], [0.35, 0.05, 0.05], [0.35, 0.05, 0.05], [0.35, 0.05, 0.05], [0.25, 0.05, 0.05]]
        occ = voxel_occupancy(cloud(pts), (0.0, 0.05, 0.05), UNIT)
        assert occ.probability[5, 5, 5] == 0.5
        assert occ.probability[3, 0, 0] == 1.0
        # voxel (2,0,0) is crossed by the three far rays and hit once
        assert occ.misses[2, 0, 0] == 3 and occ.hits[2, 0, 0] == 1
        assert occ.probability[2, 0, 0] == 0.25

    def test_range(self):
        rng = np.random.default_rng(4)
        occ = voxel_occupancy(cloud(rng.uniform(0, 1, (300, 3))), (0.5, 0.5, 0.5), UNIT)
        assert occ.probability.min() >= 0 and occ.probability.max() <= 1


class TestObservedMask:
    @pytest.mark.parametrize("t,h,want", [(0, 0, False), (5, 0, True), (0, 1, True)])
    def test_rule(self, t, h, want):
        obs = ObservabilityMap(np.array([[t]]), np.array([[h]]))
        assert observed_mask(obs).observed[0, 0] == want

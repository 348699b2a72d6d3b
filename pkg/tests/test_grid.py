import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pillarseg.dataset_io import LabelSet, PointCloud
from pillarseg.errors import IndexOutOfGrid, InvalidGridSpec, PairMismatch
from pillarseg.grid import GridSpec, cell_of, center_of, crop_cloud, default_spec, voxel_of


class TestDefaultSpec:
    def test_dims(self):
        spec = default_spec()
        assert (spec.W, spec.H, spec.Z) == (1000, 500, 20)
        assert spec.z_mid == -0.5

    def test_dict_round_trip(self):
        spec = default_spec()
        assert GridSpec.from_dict(spec.to_dict()) == spec

    @pytest.mark.parametrize(
        "args",
        [((1, 0), (0, 1), (0, 1), 0.1, 0.1), ((0, 1), (0, 1), (0, 1), 0.0, 0.1), ((0, 1), (0, 1), (0, 1), 0.3, 0.1)],
    )
    def test_invalid(self, args):
        with pytest.raises(InvalidGridSpec):
            GridSpec(*args)


class TestCellOf:
    spec = default_spec()

    def test_origin(self):
        assert cell_of((0, 0, 0), self.spec) == (500, 250)

    def test_lower_bound_inclusive(self):
        assert cell_of((-50, -25, 0), self.spec) == (0, 0)

    def test_upper_bound_exclusive(self):
        assert cell_of((50, 0, 0), self.spec) is None

    def test_z_outside(self):
        assert cell_of((0, 0, 1.5), self.spec) is None


class TestVoxelOf:
    spec = default_spec()

    def test_floor(self):
        assert voxel_of((0, 0, -2.5), self.spec) == (500, 250, 0)
        assert voxel_of((0, 0, 0.0), self.spec) == (500, 250, 12)

    def test_exclusive_top(self):
        assert voxel_of((0, 0, 1.5), self.spec) is None


class TestCenterOf:
    spec = default_spec()

    @pytest.mark.parametrize("ij,xy", [((0, 0), (-49.95, -24.95)), ((999, 499), (49.95, 24.95)), ((500, 250), (0.05, 0.05))])
    def test_values(self, ij, xy):
        np.testing.assert_allclose(center_of(*ij, self.spec), xy, atol=1e-9)

    def test_out_of_grid(self):
        with pytest.raises(IndexOutOfGrid):
            center_of(1000, 0, self.spec)

    def test_cell_of_center_identity(self):
        spec = GridSpec((-6.4, 6.4), (-3.2, 3.2), (-2.5, 1.5), 0.2, 0.2)
        for i in range(spec.W):
            for j in range(spec.H):
                x, y = center_of(i, j, spec)
                assert cell_of((x, y, 0.0), spec) == (i, j)


class TestCrop:
    spec = default_spec()

    def test_drops_out_of_range(self):
        cloud = PointCloud(np.array([[0, 0, 0, 0.1], [60, 0, 0, 0.2], [0, 0, -3, 0.3]]))
        labels = LabelSet(np.array([1, 2, 3]), np.zeros(3, dtype=bool))
        c, l = crop_cloud(cloud, labels, self.spec)
        np.testing.assert_array_equal(c.points, [[0, 0, 0, 0.1]])
        np.testing.assert_array_equal(l.class_id, [1])

    def test_identity_when_inside(self):
        cloud = PointCloud(np.array([[1, 2, 0, 0.1], [-3, 4, 1, 0.2]]))
        c, l = crop_cloud(cloud, None, self.spec)
        np.testing.assert_array_equal(c.points, cloud.points)
        assert l is None

    def test_pair_mismatch(self):
        with pytest.raises(PairMismatch):
            crop_cloud(PointCloud(np.zeros((2, 4))), LabelSet(np.zeros(1), np.zeros(1)), self.spec)


@settings(max_examples=200, deadline=None)
@given(st.floats(-49.99, 49.99), st.floats(-24.99, 24.99))
def test_y_flip_mirrors_column(x, y):
    spec = default_spec()
    u = (y + 25.0) / 0.1
    if abs(u - round(u)) < 1e-6:
        return
    i, j = cell_of((x, y, 0.0), spec)
    assert cell_of((x, -y, 0.0), spec) == (i, spec.H - 1 - j)

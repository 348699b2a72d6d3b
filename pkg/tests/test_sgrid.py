import struct

import numpy as np
import pytest

from pillarseg.errors import SgridFormatError
from pillarseg.sgrid import DTYPE_F32, DTYPE_U8, DTYPE_U32, decode_sgrid, encode_sgrid, make_sgrid


class TestSgrid:
    def test_header(self):
        data = encode_sgrid(make_sgrid(np.zeros((3, 2), dtype=np.uint8), DTYPE_U8))
        assert data[:4] == b"SGRD"
        assert struct.unpack_from("<BBBBIII", data, 4) == (1, 0, 0, 0, 3, 2, 1)
        assert len(data) == 20 + 6

    def test_index_order(self):
        a = np.arange(6).reshape(3, 2).astype(np.uint8)
        payload = encode_sgrid(make_sgrid(a, DTYPE_U8))[20:]
        # i fastest, then j
        assert list(payload) == [a[0, 0], a[1, 0], a[2, 0], a[0, 1], a[1, 1], a[2, 1]]

    @pytest.mark.parametrize("dt,arr", [
        (DTYPE_U8, np.array([[0, 255], [3, 7]])),
        (DTYPE_F32, np.random.default_rng(0).random((4, 3, 5))),
        (DTYPE_U32, np.array([[[0, 2**32 - 1]]])),
    ])
    def test_round_trip(self, dt, arr):
        g = make_sgrid(arr, dt, flags=1)
        back = decode_sgrid(encode_sgrid(g))
        assert back.dtype == dt and back.flags == 1
        np.testing.assert_array_equal(back.data, g.data)

    @pytest.mark.parametrize("arr,dt", [(np.array([[256]]), DTYPE_U8), (np.array([[-1]]), DTYPE_U32), (np.array([[0.5]]), DTYPE_U8)])
    def test_value_range(self, arr, dt):
        with pytest.raises(SgridFormatError):
            make_sgrid(arr, dt)

    @pytest.mark.parametrize("mutate", [
        lambda b: b[:10],
        lambda b: b"XXXX" + b[4:],
        lambda b: b[:4] + b"\x02" + b[5:],
        lambda b: b[:5] + b"\x07" + b[6:],
        lambda b: b[:-1],
        lambda b: b + b"\0",
    ])
    def test_corrupt(self, mutate):
        data = encode_sgrid(make_sgrid(np.zeros((2, 2)), DTYPE_U8))
        with pytest.raises(SgridFormatError):
            decode_sgrid(mutate(data))

    def test_grid2d(self):
        g = make_sgrid(np.zeros((2, 2, 3)), DTYPE_F32)
        with pytest.raises(SgridFormatError):
            g.grid2d()

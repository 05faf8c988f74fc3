import numpy as np
import pytest

from fvnet.tensor import (TensorFileError, crop, read_tensor, validate_tensor4,
                          write_tensor)


def rand_tensor(rng, shape, dtype=np.float64):
    return rng.normal(size=shape).astype(dtype)


class TestCrop:
    def test_identity_crop(self):
        rng = np.random.default_rng(0)
        t = rand_tensor(rng, (2, 3, 4, 5))
        out = crop(t, (0, 0, 0, 0), t.shape)
        np.testing.assert_array_equal(out, t)
        assert out is not t

    def test_empty_crop(self):
        rng = np.random.default_rng(1)
        t = rand_tensor(rng, (2, 3, 4, 5))
        out = crop(t, (1, 0, 2, 0), (0, 3, 2, 5))
        assert out.shape == (0, 3, 2, 5)

    def test_against_naive_loop(self):
        rng = np.random.default_rng(2)
        t = rand_tensor(rng, (2, 4, 4, 3))
        offsets, sizes = (0, 1, 1, 0), (2, 2, 2, 3)
        out = crop(t, offsets, sizes)
        expected = np.empty(sizes)
        for a in range(sizes[0]):
            for b in range(sizes[1]):
                for c in range(sizes[2]):
                    for d in range(sizes[3]):
                        expected[a, b, c, d] = t[offsets[0] + a, offsets[1] + b,
                                                 offsets[2] + c, offsets[3] + d]
        np.testing.assert_array_equal(out, expected)

    def test_source_unchanged(self):
        rng = np.random.default_rng(3)
        t = rand_tensor(rng, (2, 3, 3, 1))
        before = t.copy()
        out = crop(t, (0, 1, 1, 0), (1, 2, 2, 1))
        out[...] = 0.0
        np.testing.assert_array_equal(t, before)

    def test_out_of_range_names_axis(self):
        t = np.zeros((2, 3, 4, 5))
        with pytest.raises(IndexError, match="axis 2"):
            crop(t, (0, 0, 3, 0), (1, 1, 2, 1))
        with pytest.raises(IndexError, match="axis 0"):
            crop(t, (2, 0, 0, 0), (1, 1, 1, 1))

    def test_crop_composition(self):
        # crop of crop == single crop with summed offsets
        rng = np.random.default_rng(4)
        for _ in range(20):
            dims = tuple(rng.integers(3, 8, size=4))
            t = rand_tensor(rng, dims)
            off1 = tuple(int(rng.integers(0, d - 2)) for d in dims)
            size1 = tuple(int(rng.integers(2, d - o + 1))
                          for o, d in zip(off1, dims))
            off2 = tuple(int(rng.integers(0, s - 1)) for s in size1)
            size2 = tuple(int(rng.integers(1, s - o + 1))
                          for o, s in zip(off2, size1))
            double = crop(crop(t, off1, size1), off2, size2)
            single = crop(t, tuple(a + b for a, b in zip(off1, off2)), size2)
            np.testing.assert_array_equal(double, single)

    def test_validate_rejects_wrong_ndim(self):
        with pytest.raises(ValueError, match="4 dims"):
            validate_tensor4(np.zeros((2, 2)))


class TestTensorFile:
    def test_roundtrip_f64(self, tmp_path):
        rng = np.random.default_rng(5)
        t = rand_tensor(rng, (3, 4, 5, 2))
        path = tmp_path / "t.fvnt"
        write_tensor(path, t)
        back = read_tensor(path)
        assert back.dtype == np.float64
        assert back.shape == t.shape
        assert np.array_equal(back.view(np.uint64), t.view(np.uint64))

    def test_roundtrip_f32(self, tmp_path):
        rng = np.random.default_rng(6)
        t = rand_tensor(rng, (2, 8, 8, 1), dtype=np.float32)
        path = tmp_path / "t.fvnt"
        write_tensor(path, t)
        back = read_tensor(path)
        assert back.dtype == np.float32
        assert np.array_equal(back.view(np.uint32), t.view(np.uint32))

    def test_roundtrip_vector(self, tmp_path):
        # the format stores arbitrary ndim (exported descriptors are 1-d)
        v = np.linspace(0.0, 1.0, 17)
        path = tmp_path / "v.fvnt"
        write_tensor(path, v)
        np.testing.assert_array_equal(read_tensor(path), v)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.fvnt"
        path.write_bytes(b"XXXX" + b"\x00" * 32)
        with pytest.raises(TensorFileError, match="bad magic"):
            read_tensor(path)

    def test_bad_dtype_code(self, tmp_path):
        import struct
        path = tmp_path / "bad.fvnt"
        path.write_bytes(b"FVNT" + struct.pack("<III", 1, 9, 1)
                         + struct.pack("<I", 2) + b"\x00" * 16)
        with pytest.raises(TensorFileError, match="bad dtype code"):
            read_tensor(path)

    def test_bad_version(self, tmp_path):
        import struct
        path = tmp_path / "bad.fvnt"
        path.write_bytes(b"FVNT" + struct.pack("<III", 7, 2, 1)
                         + struct.pack("<I", 1) + b"\x00" * 8)
        with pytest.raises(TensorFileError, match="version"):
            read_tensor(path)

    def test_truncated_payload(self, tmp_path):
        rng = np.random.default_rng(7)
        t = rand_tensor(rng, (2, 2, 2, 2))
        path = tmp_path / "t.fvnt"
        write_tensor(path, t)
        blob = path.read_bytes()
        path.write_bytes(blob[:-5])
        with pytest.raises(TensorFileError, match="truncated payload"):
            read_tensor(path)

    def test_trailing_bytes(self, tmp_path):
        rng = np.random.default_rng(8)
        t = rand_tensor(rng, (1, 2, 2, 1))
        path = tmp_path / "t.fvnt"
        write_tensor(path, t)
        path.write_bytes(path.read_bytes() + b"\x01")
        with pytest.raises(TensorFileError, match="trailing"):
            read_tensor(path)

    def test_rejects_int_dtype(self, tmp_path):
        with pytest.raises(TensorFileError, match="dtype"):
            write_tensor(tmp_path / "t.fvnt", np.zeros((2, 2), dtype=np.int32))

import io
import struct

import numpy as np
import pytest

from sarseg.weights import (WTS_MAGIC, WeightStore, check_congruent,
                            load_wts, load_wts_stream, save_wts,
                            save_wts_stream, zeros_like_store)


def _store(rng):
    s = WeightStore()
    s["a.w"] = rng.standard_normal((3, 2, 3, 3))
    s["a.b"] = rng.standard_normal(3)
    s["deep.block.fuse.w"] = rng.standard_normal((4, 6, 1, 1))
    return s


class TestWeightStore:
    def test_coerces_to_float32(self):
        s = WeightStore()
        s["x"] = np.arange(4, dtype=np.float64)
        assert s["x"].dtype == np.float32

    def test_total_scalars(self, rng):
        s = _store(rng)
        assert s.total_scalars() == 3 * 2 * 3 * 3 + 3 + 4 * 6

    def test_copy_is_deep(self, rng):
        s = _store(rng)
        c = s.copy()
        c["a.b"][0] = 99.0
        assert s["a.b"][0] != 99.0

    def test_names_order_preserved(self, rng):
        s = _store(rng)
        assert s.names() == ["a.w", "a.b", "deep.block.fuse.w"]

    def test_zeros_like(self, rng):
        s = _store(rng)
        z = zeros_like_store(s)
        for n in s.names():
            assert z[n].shape == s[n].shape
            assert not z[n].any()

    def test_check_congruent(self, rng):
        s = _store(rng)
        check_congruent(s, zeros_like_store(s))
        bad = zeros_like_store(s)
        del bad["a.b"]
        with pytest.raises(ValueError, match="a.b"):
            check_congruent(s, bad)
        bad = zeros_like_store(s)
        bad["a.b"] = np.zeros(5)
        with pytest.raises(ValueError, match="a.b"):
            check_congruent(s, bad)


class TestRoundTrip:
    def test_file_round_trip(self, rng, tmp_path):
        s = _store(rng)
        path = tmp_path / "w.wts"
        save_wts(s, path)
        back = load_wts(path)
        assert back.names() == s.names()
        for n in s.names():
            np.testing.assert_array_equal(back[n], s[n])
            assert back[n].dtype == np.float32

    def test_stream_round_trip_empty(self):
        buf = io.BytesIO()
        save_wts_stream(WeightStore(), buf)
        buf.seek(0)
        assert len(load_wts_stream(buf)) == 0

    def test_scalar_normalized_to_rank_one(self):
        # the store keeps contiguous arrays; a bare scalar becomes shape (1,)
        s = WeightStore()
        s["t"] = np.float32(2.5)
        assert s["t"].shape == (1,)
        buf = io.BytesIO()
        save_wts_stream(s, buf)
        buf.seek(0)
        back = load_wts_stream(buf)
        assert back["t"].shape == (1,)
        assert float(back["t"][0]) == 2.5

    def test_byte_layout(self):
        s = WeightStore()
        s["ab"] = np.array([1.0, 2.0], dtype=np.float32)
        buf = io.BytesIO()
        save_wts_stream(s, buf)
        raw = buf.getvalue()
        want = (WTS_MAGIC + struct.pack("<I", 1)
                + struct.pack("<H", 2) + b"ab"
                + struct.pack("<B", 1) + struct.pack("<I", 2)
                + struct.pack("<ff", 1.0, 2.0))
        assert raw == want


class TestLoadErrors:
    def _bytes(self, rng):
        buf = io.BytesIO()
        save_wts_stream(_store(rng), buf)
        return buf.getvalue()

    def test_bad_magic(self, rng):
        raw = b"XXXX" + self._bytes(rng)[4:]
        with pytest.raises(ValueError, match="magic"):
            load_wts_stream(io.BytesIO(raw))

    def test_truncated_header(self):
        with pytest.raises(ValueError, match="truncated"):
            load_wts_stream(io.BytesIO(WTS_MAGIC + b"\x01"))

    def test_truncated_payload(self, rng):
        raw = self._bytes(rng)
        with pytest.raises(ValueError, match="truncated"):
            load_wts_stream(io.BytesIO(raw[:-5]))

    def test_duplicate_names(self):
        s = WeightStore()
        s["t"] = np.zeros(2, dtype=np.float32)
        buf = io.BytesIO()
        save_wts_stream(s, buf)
        body = buf.getvalue()
        # stitch the same record twice under a count of 2
        record = body[8:]
        raw = WTS_MAGIC + struct.pack("<I", 2) + record + record
        with pytest.raises(ValueError, match="duplicate"):
            load_wts_stream(io.BytesIO(raw))

    def test_missing_expected_tensor(self, rng):
        raw = self._bytes(rng)
        expected = {"a.w": (3, 2, 3, 3), "a.b": (3,),
                    "deep.block.fuse.w": (4, 6, 1, 1), "ghost": (1,)}
        with pytest.raises(ValueError, match="ghost"):
            load_wts_stream(io.BytesIO(raw), expected)

    def test_wrong_rank(self, rng):
        raw = self._bytes(rng)
        expected = {"a.w": (3, 2, 3, 3), "a.b": (3, 1),
                    "deep.block.fuse.w": (4, 6, 1, 1)}
        with pytest.raises(ValueError, match="rank"):
            load_wts_stream(io.BytesIO(raw), expected)

    def test_wrong_shape(self, rng):
        raw = self._bytes(rng)
        expected = {"a.w": (2, 3, 3, 3), "a.b": (3,),
                    "deep.block.fuse.w": (4, 6, 1, 1)}
        with pytest.raises(ValueError, match="a.w"):
            load_wts_stream(io.BytesIO(raw), expected)

    def test_extra_tensor_rejected(self, rng):
        raw = self._bytes(rng)
        expected = {"a.w": (3, 2, 3, 3), "a.b": (3,)}
        with pytest.raises(ValueError, match="deep.block.fuse.w"):
            load_wts_stream(io.BytesIO(raw), expected)

    def test_unvalidated_load_accepts_anything(self, rng):
        raw = self._bytes(rng)
        assert len(load_wts_stream(io.BytesIO(raw))) == 3

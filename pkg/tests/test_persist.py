"""Checkpoint container and P6 image round trips, plus malformed-input errors."""

import struct

import numpy as np
import pytest

from satmark.persist import (
    MAGIC,
    VERSION,
    FormatError,
    load_checkpoint,
    ppm_read,
    ppm_write,
    save_checkpoint,
)
from satmark.rng import stream


def sample_tensors(seed):
    r = stream(seed, "ckpt")
    shapes = {
        "proc.gate0.w": (8, 8, 1, 1),
        "ext.head.b": (16,),
        "meta.step": (),
        "opt.m.long/name.with.dots": (2, 3, 4),
    }
    out = {}
    for name, shape in shapes.items():
        n = int(np.prod(shape)) if shape else 1
        out[name] = r.normals(n).reshape(shape).astype(np.float32)
    return out


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        tensors = sample_tensors(1)
        h = bytes(range(32))
        path = tmp_path / "a.ntc"
        save_checkpoint(path, tensors, h)
        loaded, h2 = load_checkpoint(path)
        assert h2 == h
        assert sorted(loaded) == sorted(tensors)
        for name in tensors:
            assert loaded[name].shape == tensors[name].shape
            assert loaded[name].tobytes() == tensors[name].tobytes()

    def test_insertion_order_irrelevant(self, tmp_path):
        tensors = sample_tensors(2)
        reversed_dict = dict(reversed(list(tensors.items())))
        p1, p2 = tmp_path / "a.ntc", tmp_path / "b.ntc"
        save_checkpoint(p1, tensors, b"\0" * 32)
        save_checkpoint(p2, reversed_dict, b"\0" * 32)
        assert p1.read_bytes() == p2.read_bytes()

    def test_save_is_deterministic(self, tmp_path):
        tensors = sample_tensors(3)
        p1, p2 = tmp_path / "a.ntc", tmp_path / "b.ntc"
        save_checkpoint(p1, tensors, b"\x11" * 32)
        save_checkpoint(p2, tensors, b"\x11" * 32)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.ntc"
        p.write_bytes(b"NOPE" + b"\0" * 64)
        with pytest.raises(FormatError) as exc:
            load_checkpoint(p)
        assert exc.value.offset == 0

    def test_unknown_version(self, tmp_path):
        p = tmp_path / "x.ntc"
        p.write_bytes(MAGIC + struct.pack("<I", VERSION + 1) + b"\0" * 36)
        with pytest.raises(FormatError) as exc:
            load_checkpoint(p)
        assert exc.value.offset == 4
        assert "version" in str(exc.value)

    def test_truncation_reports_offset(self, tmp_path):
        tensors = sample_tensors(4)
        full = tmp_path / "full.ntc"
        save_checkpoint(full, tensors, b"\0" * 32)
        data = full.read_bytes()
        # cut in the header, in a name, and mid-payload
        for cut in (2, 10, 40, 46, len(data) - 3):
            p = tmp_path / f"cut{cut}.ntc"
            p.write_bytes(data[:cut])
            with pytest.raises(FormatError) as exc:
                load_checkpoint(p)
            assert "truncated" in str(exc.value) or "magic" in str(exc.value)
            assert 0 <= exc.value.offset <= cut

    def test_trailing_bytes_rejected(self, tmp_path):
        p = tmp_path / "x.ntc"
        save_checkpoint(p, sample_tensors(5), b"\0" * 32)
        data = p.read_bytes()
        p.write_bytes(data + b"\xaa")
        with pytest.raises(FormatError) as exc:
            load_checkpoint(p)
        assert exc.value.offset == len(data)

    def _entry(self, name: bytes, arr: np.ndarray) -> bytes:
        out = struct.pack("<H", len(name)) + name
        out += struct.pack("<BB", 0, arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        return out + arr.astype("<f4").tobytes()

    def test_duplicate_name_rejected(self, tmp_path):
        arr = np.zeros(2, dtype=np.float32)
        body = self._entry(b"dup", arr) + self._entry(b"dup", arr)
        p = tmp_path / "x.ntc"
        p.write_bytes(MAGIC + struct.pack("<I", VERSION) + b"\0" * 32 + struct.pack("<I", 2) + body)
        with pytest.raises(FormatError) as exc:
            load_checkpoint(p)
        assert "duplicate" in str(exc.value)
        # the offset points at the second entry's name
        assert exc.value.offset == 44 + len(self._entry(b"dup", arr)) + 2

    def test_unknown_dtype_code(self, tmp_path):
        entry = struct.pack("<H", 1) + b"a" + struct.pack("<BB", 7, 1)
        entry += struct.pack("<I", 0)
        p = tmp_path / "x.ntc"
        p.write_bytes(MAGIC + struct.pack("<I", VERSION) + b"\0" * 32 + struct.pack("<I", 1) + entry)
        with pytest.raises(FormatError) as exc:
            load_checkpoint(p)
        assert "dtype" in str(exc.value)
        assert exc.value.offset == 47

    def test_non_utf8_name(self, tmp_path):
        entry = struct.pack("<H", 2) + b"\xff\xfe" + struct.pack("<BB", 0, 0)
        p = tmp_path / "x.ntc"
        p.write_bytes(MAGIC + struct.pack("<I", VERSION) + b"\0" * 32 + struct.pack("<I", 1) + entry)
        with pytest.raises(FormatError) as exc:
            load_checkpoint(p)
        assert "UTF-8" in str(exc.value)

    def test_bad_hash_length(self, tmp_path):
        with pytest.raises(ValueError):
            save_checkpoint(tmp_path / "x.ntc", {}, b"short")

    def test_scalar_tensor(self, tmp_path):
        p = tmp_path / "s.ntc"
        save_checkpoint(p, {"step": np.float32(41.0)}, b"\0" * 32)
        loaded, _ = load_checkpoint(p)
        assert loaded["step"].shape == ()
        assert float(loaded["step"]) == 41.0


class TestPPM:
    def test_single_white_pixel_bytes(self, tmp_path):
        p = tmp_path / "w.ppm"
        ppm_write(p, np.ones((3, 1, 1), dtype=np.float32))
        assert p.read_bytes() == b"P6\n1 1\n255\n\xff\xff\xff"

    def test_round_trip_quantization_bound(self, tmp_path):
        r = stream(6, "ppm")
        img = r.uniforms(3 * 9 * 7).reshape(3, 9, 7).astype(np.float32)
        p = tmp_path / "r.ppm"
        ppm_write(p, img)
        back = ppm_read(p)
        assert back.shape == (3, 9, 7)
        assert np.max(np.abs(back - img)) <= 1.0 / 510.0 + 1e-7

    def test_black_and_white_exact(self, tmp_path):
        img = np.zeros((3, 2, 2), dtype=np.float32)
        img[:, 0, 0] = 1.0
        p = tmp_path / "bw.ppm"
        ppm_write(p, img)
        assert np.array_equal(ppm_read(p), img)

    def test_write_rejects_bad_shape_and_range(self, tmp_path):
        with pytest.raises(ValueError):
            ppm_write(tmp_path / "x.ppm", np.zeros((1, 4, 4)))
        with pytest.raises(ValueError):
            ppm_write(tmp_path / "x.ppm", np.full((3, 2, 2), 1.5))

    def test_not_p6(self, tmp_path):
        p = tmp_path / "x.ppm"
        p.write_bytes(b"P5\n1 1\n255\n\xff")
        with pytest.raises(FormatError) as exc:
            ppm_read(p)
        assert exc.value.offset == 0

    def test_maxval_other_than_255(self, tmp_path):
        p = tmp_path / "x.ppm"
        p.write_bytes(b"P6\n1 1\n65535\n" + b"\0" * 6)
        with pytest.raises(FormatError) as exc:
            ppm_read(p)
        assert "maxval" in str(exc.value)
        assert exc.value.offset == 7

    def test_bad_width_token(self, tmp_path):
        p = tmp_path / "x.ppm"
        p.write_bytes(b"P6\n1x 1\n255\n\xff\xff\xff")
        with pytest.raises(FormatError) as exc:
            ppm_read(p)
        assert exc.value.offset == 3

    def test_truncated_pixels(self, tmp_path):
        p = tmp_path / "x.ppm"
        p.write_bytes(b"P6\n2 2\n255\n" + b"\xff" * 5)
        with pytest.raises(FormatError) as exc:
            ppm_read(p)
        assert "truncated" in str(exc.value)

    def test_trailing_pixel_bytes(self, tmp_path):
        p = tmp_path / "x.ppm"
        p.write_bytes(b"P6\n1 1\n255\n" + b"\xff" * 4)
        with pytest.raises(FormatError):
            ppm_read(p)

    def test_missing_header_token(self, tmp_path):
        p = tmp_path / "x.ppm"
        p.write_bytes(b"P6\n1")
        with pytest.raises(FormatError):
            ppm_read(p)

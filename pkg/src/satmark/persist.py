"""On-disk formats: the named-tensor checkpoint container and P6 images.

Checkpoint layout (all integers little-endian):

    magic   4 bytes  "SATW"
    version u32      (currently 1)
    confhash 32 bytes (sha-256 of the canonical run configuration)
    count   u32      number of tensors
    per tensor, sorted by name:
        name_len u16, name UTF-8
        dtype    u8  (0 = float32, the only defined value)
        rank     u8
        extents  u32 * rank
        payload  little-endian float32, C order

Tensors are written sorted by name, so identical dicts give identical bytes.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"SATW"
VERSION = 1


class FormatError(Exception):
    """Malformed on-disk data. Carries the byte offset of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte {offset})")
        self.offset = offset


def save_checkpoint(path, tensors: dict[str, np.ndarray], config_hash: bytes) -> None:
    if len(config_hash) != 32:
        raise ValueError("config hash must be 32 bytes")
    parts = [MAGIC, struct.pack("<I", VERSION), config_hash, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        # ascontiguousarray would promote rank-0 tensors to rank 1
        arr = np.asarray(tensors[name], dtype="<f4", order="C")
        nb = name.encode("utf-8")
        if len(nb) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name!r}")
        if arr.ndim > 0xFF:
            raise ValueError("tensor rank > 255")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<BB", 0, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], bytes]:
    with open(path, "rb") as f:
        buf = f.read()
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"truncated checkpoint while reading {what}", pos)
        out = buf[pos : pos + n]
        pos += n
        return out

    if take(4, "magic") != MAGIC:
        raise FormatError("bad magic, not a checkpoint file", 0)
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    config_hash = take(32, "config hash")
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name_off = pos
        try:
            name = take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not valid UTF-8", name_off) from None
        dtype_off = pos
        dtype, rank = struct.unpack("<BB", take(2, "dtype/rank"))
        if dtype != 0:
            raise FormatError(f"unknown dtype code {dtype}", dtype_off)
        shape = struct.unpack(f"<{rank}I", take(4 * rank, "extents"))
        n_elem = 1
        for e in shape:
            n_elem *= e
        payload = take(4 * n_elem, f"payload of {name!r}")
        if name in tensors:
            raise FormatError(f"duplicate tensor name {name!r}", name_off)
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
    if pos != len(buf):
        raise FormatError("trailing bytes after last tensor", pos)
    return tensors, config_hash


# -- PPM (binary P6, maxval 255) --------------------------------------------


def ppm_write(path, image: np.ndarray) -> None:
    """Write a (3, H, W) image with values in [0, 1] as binary P6."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"ppm_write expects (3, H, W), got {img.shape}")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("ppm_write expects values in [0, 1]")
    _, h, w = img.shape
    bytes8 = np.round(img * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(bytes8.transpose(1, 2, 0).tobytes())


def ppm_read(path) -> np.ndarray:
    """Read binary P6 back to (3, H, W) float32 in [0, 1]. Only maxval 255."""
    with open(path, "rb") as f:
        buf = f.read()
    pos = 0

    def token(what: str) -> tuple[bytes, int]:
        nonlocal pos
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"missing {what}", start)
        return buf[start:pos], start

    magic, off = token("magic")
    if magic != b"P6":
        raise FormatError("not a P6 file", off)

    def int_token(what: str) -> int:
        tok, off = token(what)
        if not tok.isdigit():
            raise FormatError(f"bad {what} {tok!r}", off)
        return int(tok)

    w = int_token("width")
    h = int_token("height")
    maxval_tok, maxval_off = token("maxval")
    if maxval_tok != b"255":
        raise FormatError(f"unsupported maxval {maxval_tok!r}, need 255", maxval_off)
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise FormatError("missing whitespace after maxval", pos)
    pos += 1
    need = w * h * 3
    if len(buf) - pos < need:
        raise FormatError(
            f"truncated pixel data, need {need} bytes, have {len(buf) - pos}", len(buf)
        )
    if len(buf) - pos > need:
        raise FormatError("trailing bytes after pixel data", pos + need)
    pix = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    img = pix.reshape(h, w, 3).transpose(2, 0, 1)
    return (img.astype(np.float32) / np.float32(255.0)).astype(np.float32)

"""Differentiable image attacks.

Seven parameterized distortions stress the watermark during training and
evaluation: Gaussian blur, additive noise, brightness, contrast,
desaturation, perspective warp, and a JPEG simulation. Every attack maps
[0,1] images to [0,1] images and admits gradient flow to the input image
(straight-through at rounding and clamping).

Intensities anneal with a factor gamma in [0,1] that interpolates from the
kind's neutral point: effective = neutral + gamma * (raw - neutral). Neutral
intensity is an identity for every kind except jpeg, whose mildest setting
(QF 50) still quantizes.

Apply-time randomness (the brightness sign, the noise field, the perspective
corner draw) comes from the spec's seed field so a sampled attack is a pure
value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ndiff
from .ndiff import Tensor
from .rng import Stream, stream

KINDS = ("blur", "gauss_noise", "brightness", "contrast", "desaturate", "perspective", "jpeg")

NEUTRAL = {
    "blur": 0.0,
    "gauss_noise": 0.0,
    "brightness": 0.0,
    "contrast": 1.0,
    "desaturate": 0.0,
    "perspective": 0.0,
    "jpeg": 50.0,
}


@dataclass(frozen=True)
class AttackRanges:
    blur_sigma: tuple[float, float] = (0.0, 1.5)
    noise_std: tuple[float, float] = (0.0, 0.08)
    brightness_shift: tuple[float, float] = (0.0, 0.3)
    contrast_factor: tuple[float, float] = (0.5, 1.5)
    desat_alpha: tuple[float, float] = (0.0, 1.0)
    perspective_strength: tuple[float, float] = (0.0, 0.1)
    jpeg_quality: tuple[float, float] = (0.0, 50.0)

    def __post_init__(self):
        for kind in KINDS:
            lo, hi = self.of(kind)
            if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
                raise ndiff.ContractError(f"bad range for {kind}: ({lo}, {hi})")
            if not lo <= NEUTRAL[kind] <= hi:
                raise ndiff.ContractError(f"neutral point of {kind} outside its range")

    def of(self, kind: str) -> tuple[float, float]:
        return {
            "blur": self.blur_sigma,
            "gauss_noise": self.noise_std,
            "brightness": self.brightness_shift,
            "contrast": self.contrast_factor,
            "desaturate": self.desat_alpha,
            "perspective": self.perspective_strength,
            "jpeg": self.jpeg_quality,
        }[kind]


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    intensity: float
    gamma: float = 1.0
    seed: int = 0


def schedule_gamma(step: int, total_steps: int) -> float:
    """Ramp: full attack strength from the halfway point on."""
    if total_steps <= 0:
        raise ndiff.ContractError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ndiff.ContractError("step must lie in [0, total_steps]")
    return min(1.0, 2.0 * step / total_steps)


def sample_attack(r: Stream, gamma: float, ranges: AttackRanges) -> AttackSpec:
    """Uniform kind, uniform raw intensity in the kind's range, annealed
    toward the neutral point by gamma."""
    if not 0.0 <= gamma <= 1.0:
        raise ndiff.ContractError("gamma must lie in [0, 1]")
    kind = KINDS[r.integer(0, len(KINDS))]
    lo, hi = ranges.of(kind)
    raw = r.uniform(lo, hi)
    eff = NEUTRAL[kind] + gamma * (raw - NEUTRAL[kind])
    seed = int(r.u64(1)[0])
    return AttackSpec(kind=kind, intensity=float(eff), gamma=float(gamma), seed=seed)


# -- the attacks -----------------------------------------------------------


def _check_image(image: Tensor) -> tuple[int, int, int]:
    if image.data.ndim != 3:
        raise ndiff.DimensionError("attack expects a (C, H, W) image")
    if image.data.min() < -1e-6 or image.data.max() > 1 + 1e-6:
        raise ndiff.ContractError("attack input must lie in [0, 1]")
    return image.data.shape


def gaussian_kernel7(sigma: float, dtype) -> np.ndarray:
    x = np.arange(-3, 4, dtype=np.float64)
    if sigma < 1e-9:
        k1 = (x == 0).astype(np.float64)
    else:
        k1 = np.exp(-0.5 * (x / sigma) ** 2)
    k2 = np.outer(k1, k1)
    return (k2 / k2.sum()).astype(dtype)


def _blur(image: Tensor, sigma: float) -> Tensor:
    c, h, w = image.data.shape
    k = gaussian_kernel7(sigma, image.dtype)
    wfull = np.zeros((c, c, 7, 7), dtype=image.data.dtype)
    for i in range(c):
        wfull[i, i] = k
    padded = ndiff.pad_reflect2d(image, 3)
    return ndiff.conv2d(padded, Tensor(wfull))


def _noise(image: Tensor, std: float, seed: int) -> Tensor:
    if std < 0:
        raise ndiff.ContractError("noise std must be >= 0")
    n = stream(seed, "noise").normals(image.data.size).reshape(image.data.shape)
    return ndiff.clamp01(image + Tensor((std * n).astype(image.data.dtype)))


def _brightness(image: Tensor, magnitude: float, seed: int) -> Tensor:
    if magnitude < 0:
        raise ndiff.ContractError("brightness magnitude must be >= 0")
    beta = stream(seed, "brightness").uniform(-magnitude, magnitude)
    return ndiff.clamp01(image + float(beta))


def _contrast(image: Tensor, factor: float) -> Tensor:
    if factor <= 0:
        raise ndiff.ContractError("contrast factor must be positive")
    return ndiff.clamp01((image - 0.5) * factor + 0.5)


_LUMA = (0.299, 0.587, 0.114)


def _desat(image: Tensor, alpha: float) -> Tensor:
    if not 0.0 <= alpha <= 1.0:
        raise ndiff.ContractError("desaturation alpha must lie in [0, 1]")
    r = ndiff.narrow(image, 0, 0, 1)
    g = ndiff.narrow(image, 0, 1, 1)
    b = ndiff.narrow(image, 0, 2, 1)
    luma = _LUMA[0] * r + _LUMA[1] * g + _LUMA[2] * b  # (1, H, W)
    return (1.0 - alpha) * image + alpha * luma


def homography_from_quad(quad: np.ndarray) -> np.ndarray:
    """3x3 homography mapping the unit square's corners, in the order
    (0,0),(1,0),(1,1),(0,1), to the four given (x, y) points."""
    (x0, y0), (x1, y1), (x2, y2), (x3, y3) = quad
    sx = x0 - x1 + x2 - x3
    sy = y0 - y1 + y2 - y3
    dx1, dy1 = x1 - x2, y1 - y2
    dx2, dy2 = x3 - x2, y3 - y2
    den = dx1 * dy2 - dy1 * dx2
    if abs(den) < 1e-12:
        raise ndiff.NumericError("degenerate quadrilateral")
    g = (sx * dy2 - sy * dx2) / den
    h = (dx1 * sy - dy1 * sx) / den
    return np.array(
        [
            [x1 - x0 + g * x1, x3 - x0 + h * x3, x0],
            [y1 - y0 + g * y1, y3 - y0 + h * y3, y0],
            [g, h, 1.0],
        ]
    )


def perspective_grid(offsets: np.ndarray, height: int, width: int) -> np.ndarray:
    """Sampling grid (H, W, 2) in [-1,1] coords for a corner-displacement
    warp. offsets is (4, 2): per-corner (dx, dy) in pixels, corner order
    (top-left, top-right, bottom-right, bottom-left). The output pixel at a
    displaced corner samples the source at the original corner plus its
    offset."""
    base = np.array(
        [[0.0, 0.0], [width - 1.0, 0.0], [width - 1.0, height - 1.0], [0.0, height - 1.0]]
    )
    quad = base + np.asarray(offsets, dtype=np.float64)
    hm = homography_from_quad(quad / np.array([width - 1.0, height - 1.0]))
    u, v = np.meshgrid(
        np.linspace(0.0, 1.0, width), np.linspace(0.0, 1.0, height), indexing="xy"
    )
    den = hm[2, 0] * u + hm[2, 1] * v + hm[2, 2]
    if np.any(np.abs(den) < 1e-9):
        raise ndiff.NumericError("perspective denominator vanished")
    px = (hm[0, 0] * u + hm[0, 1] * v + hm[0, 2]) / den
    py = (hm[1, 0] * u + hm[1, 1] * v + hm[1, 2]) / den
    gx = 2.0 * px - 1.0
    gy = 2.0 * py - 1.0
    return np.stack([gx, gy], axis=-1)


def _perspective(image: Tensor, strength: float, seed: int) -> Tensor:
    if not 0.0 <= strength <= 0.25:
        raise ndiff.ContractError("perspective strength must lie in [0, 0.25]")
    c, h, w = image.data.shape
    lim = strength * min(h, w)
    offsets = stream(seed, "perspective").uniforms(8).reshape(4, 2) * 2 * lim - lim
    grid = perspective_grid(offsets, h, w).astype(image.data.dtype)
    return ndiff.grid_sample(image, Tensor(grid))


# -- JPEG ------------------------------------------------------------------

# ITU T.81 Annex K reference quantization tables
QT_LUMA = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)
QT_CHROMA = np.array(
    [
        [17, 18, 24, 47, 99, 99, 99, 99],
        [18, 21, 26, 66, 99, 99, 99, 99],
        [24, 26, 56, 99, 99, 99, 99, 99],
        [47, 66, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
    ],
    dtype=np.float64,
)

_DCT8 = None


def _dct8_matrix() -> np.ndarray:
    global _DCT8
    if _DCT8 is None:
        n = np.arange(8)
        m = np.cos((2 * n[None, :] + 1) * n[:, None] * np.pi / 16)
        m[0] *= math.sqrt(1.0 / 8.0)
        m[1:] *= math.sqrt(2.0 / 8.0)
        _DCT8 = m
    return _DCT8


def dct8(block: np.ndarray) -> np.ndarray:
    """Orthonormal 2-D type-II DCT of an 8x8 block. A constant block of
    value c transforms to a lone DC coefficient 8c."""
    if block.shape != (8, 8):
        raise ndiff.DimensionError("dct8 expects an 8x8 block")
    m = _dct8_matrix()
    return m @ block @ m.T


def idct8(coeffs: np.ndarray) -> np.ndarray:
    if coeffs.shape != (8, 8):
        raise ndiff.DimensionError("idct8 expects an 8x8 block")
    m = _dct8_matrix()
    return m.T @ coeffs @ m


def scaled_quant_tables(quality: float) -> tuple[np.ndarray, np.ndarray]:
    """libjpeg quality scaling; entries clamped to [1, 255]. QF below 1 is
    treated as 1."""
    qf = min(max(quality, 1.0), 100.0)
    scale = 5000.0 / qf if qf < 50 else 200.0 - 2.0 * qf
    out = []
    for qt in (QT_LUMA, QT_CHROMA):
        q = np.floor((qt * scale + 50.0) / 100.0)
        out.append(np.clip(q, 1.0, 255.0))
    return out[0], out[1]


_BLOCKDIAG_CACHE: dict[tuple[int, str], np.ndarray] = {}


def _blockdiag_dct(n: int, dtype) -> np.ndarray:
    key = (n, np.dtype(dtype).name)
    b = _BLOCKDIAG_CACHE.get(key)
    if b is None:
        b = np.kron(np.eye(n // 8), _dct8_matrix()).astype(dtype)
        _BLOCKDIAG_CACHE[key] = b
    return b


# RGB <-> full-range YCbCr (JFIF), on the 0..255 scale
_RGB2Y = (0.299, 0.587, 0.114)
_RGB2CB = (-0.168735892, -0.331264108, 0.5)
_RGB2CR = (0.5, -0.418687589, -0.081312411)


def jpeg_sim(image: Tensor, quality: float, ste_round: bool = True) -> Tensor:
    """Differentiable JPEG round trip at the given quality factor.

    Full-range YCbCr, blockwise orthonormal DCT, quantization by the scaled
    Annex K tables with straight-through rounding, no chroma subsampling.
    ste_round=False replaces rounding with identity; that path is what the
    straight-through backward pretends to differentiate, and the gradient
    tests check it directly.
    """
    c, h, w = image.data.shape
    if c != 3:
        raise ndiff.DimensionError("jpeg_sim expects an RGB image")
    if not 1.0 <= quality <= 100.0:
        raise ndiff.ContractError("jpeg quality must lie in [1, 100]")
    dt = image.data.dtype
    pad_h = (-h) % 8
    pad_w = (-w) % 8
    if pad_h or pad_w:
        # reflect-pad up to the block grid; pad_reflect2d pads all sides so
        # pad enough and crop the top-left corner back out afterwards
        p = max(pad_h, pad_w)
        padded = ndiff.pad_reflect2d(image, p)
        padded = ndiff.narrow(ndiff.narrow(padded, 1, p, h + pad_h), 2, p, w + pad_w)
    else:
        padded = image
    hp, wp = h + pad_h, w + pad_w

    x255 = padded * 255.0
    r = ndiff.reshape(ndiff.narrow(x255, 0, 0, 1), hp, wp)
    g = ndiff.reshape(ndiff.narrow(x255, 0, 1, 1), hp, wp)
    b = ndiff.reshape(ndiff.narrow(x255, 0, 2, 1), hp, wp)
    y = _RGB2Y[0] * r + _RGB2Y[1] * g + _RGB2Y[2] * b - 128.0
    cb = _RGB2CB[0] * r + _RGB2CB[1] * g + _RGB2CB[2] * b
    cr = _RGB2CR[0] * r + _RGB2CR[1] * g + _RGB2CR[2] * b

    qy, qc = scaled_quant_tables(quality)
    by = _blockdiag_dct(hp, dt)
    bx = _blockdiag_dct(wp, dt)
    tby = Tensor(by)
    tbx = Tensor(bx.T.copy())
    tby_t = Tensor(by.T.copy())
    tbx_t = Tensor(bx)

    def channel_roundtrip(ch: Tensor, qt: np.ndarray) -> Tensor:
        coeff = ndiff.matmul(ndiff.matmul(tby, ch), tbx)
        tile = np.tile(qt, (hp // 8, wp // 8)).astype(dt)
        scaled = coeff / Tensor(tile)
        quant = ndiff.round_ste(scaled) if ste_round else scaled
        deq = quant * Tensor(tile)
        return ndiff.matmul(ndiff.matmul(tby_t, deq), tbx_t)

    y2 = channel_roundtrip(y, qy) + 128.0
    cb2 = channel_roundtrip(cb, qc)
    cr2 = channel_roundtrip(cr, qc)

    r2 = y2 + 1.402 * cr2
    g2 = y2 - 0.344136286 * cb2 - 0.714136286 * cr2
    b2 = y2 + 1.772 * cb2
    out = ndiff.concat(
        [
            ndiff.reshape(r2, 1, hp, wp),
            ndiff.reshape(g2, 1, hp, wp),
            ndiff.reshape(b2, 1, hp, wp),
        ],
        axis=0,
    )
    out = ndiff.clamp01(out * (1.0 / 255.0))
    if pad_h or pad_w:
        out = ndiff.narrow(ndiff.narrow(out, 1, 0, h), 2, 0, w)
    return out


def apply(image: Tensor, spec: AttackSpec) -> Tensor:
    """Apply one attack. Differentiable w.r.t. the image; the spec is data.

    kind "identity" passes the image through, for evaluation plumbing.
    """
    _check_image(image)
    k = spec.kind
    if k == "identity":
        return image
    if k == "blur":
        if spec.intensity < 0:
            raise ndiff.ContractError("blur sigma must be >= 0")
        return _blur(image, spec.intensity)
    if k == "gauss_noise":
        return _noise(image, spec.intensity, spec.seed)
    if k == "brightness":
        return _brightness(image, spec.intensity, spec.seed)
    if k == "contrast":
        return _contrast(image, spec.intensity)
    if k == "desaturate":
        return _desat(image, spec.intensity)
    if k == "perspective":
        return _perspective(image, spec.intensity, spec.seed)
    if k == "jpeg":
        return jpeg_sim(image, max(spec.intensity, 1.0))
    raise ndiff.ContractError(f"unknown attack kind {spec.kind!r}")

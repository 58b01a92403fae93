"""Watermark embedding and extraction networks.

The message processor is a residual branch over the frozen decoder: it fuses
the latent with a linear message embedding, mirrors the decoder's stages
(weights cloned from the decoder where shapes line up), and feeds each stage
through a zero-initialized 1x1 gate conv into the corresponding decoder
activation. Zero gates make embedding the exact identity at initialization;
training opens them.

The extractor rectifies the image with a small spatial transformer (8
predicted corner offsets, applied as the inverse homography through
grid_sample) and decodes bits with a strided conv stack. The STN's final
layer starts at zero, so the initial warp is the identity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ndiff
from .attacks import homography_from_quad, perspective_grid  # noqa: F401  (oracle for tests)
from .ndiff import Tensor
from .rng import Stream, stream
from .toygen import SurrogateModel

DEFAULT_MSG_LEN = 100
SMOKE_MSG_LEN = 16
STN_OFFSET_FRAC = 0.25  # max |corner offset| as a fraction of min(H, W)

# Final-layer init gain. The joint game has a dead zone around zero: the
# residual pattern starts at zero amplitude and the untrained decoder gives
# near-zero logits, so both gradients are weak while the image penalties pull
# steadily toward an unmarked picture. A stronger decision layer at init
# raises the message gradient enough to escape before the penalties pin the
# pattern at imperceptible (hence unlearnable) amplitude.
HEAD_INIT_GAIN = 4.0

# Soft ceiling on |logit|. Without it the decoder chases perfect confidence
# under the most destructive corruption draws, and the only way to get it is
# an ever larger residual: image quality pays for accuracy on draws that are
# already lost. Saturating the output instead makes those draws cheap to
# concede, so the residual settles at the amplitude the winnable corruptions
# actually require.
LOGIT_CAP = 6.0

# Soft ceiling on each gate's injected residual. The rounding in the jpeg
# simulator backpropagates as identity, which overstates how much a pixel
# nudge can help once quantization has leveled the block; left unbounded, the
# optimizer answers that phantom signal with ever-growing injections and the
# picture degrades without limit. A saturating gate keeps the embedding
# strength on a budget no single training draw can blow through.
GATE_CAP = 0.15


@dataclass(frozen=True)
class Message:
    """An l-bit payload. bits[0] is the most significant bit of the hex
    form; the hex string is zero-padded to ceil(l/4) digits."""

    bits: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.bits, dtype=np.uint8).reshape(-1)
        if b.size == 0:
            raise ndiff.ContractError("empty message")
        if np.any((b != 0) & (b != 1)):
            raise ndiff.ContractError("message bits must be 0/1")
        object.__setattr__(self, "bits", b)

    @property
    def length(self) -> int:
        return int(self.bits.size)

    @classmethod
    def random(cls, r: Stream, length: int) -> "Message":
        return cls((r.u64(length) & np.uint64(1)).astype(np.uint8))

    def to_hex(self) -> str:
        ndigits = (self.length + 3) // 4
        padded = np.concatenate([self.bits, np.zeros(ndigits * 4 - self.length, dtype=np.uint8)])
        val = 0
        for b in padded:
            val = (val << 1) | int(b)
        return format(val, f"0{ndigits}x")

    @classmethod
    def from_hex(cls, text: str, length: int) -> "Message":
        ndigits = (length + 3) // 4
        if len(text) != ndigits:
            raise ndiff.ContractError(
                f"hex message must have exactly {ndigits} digits for {length} bits"
            )
        val = int(text, 16)
        total = ndigits * 4
        bits = [(val >> (total - 1 - i)) & 1 for i in range(total)]
        if any(bits[length:]):
            raise ndiff.ContractError("nonzero padding bits in hex message")
        return cls(np.array(bits[:length], dtype=np.uint8))

    def floats(self, dtype=np.float32) -> np.ndarray:
        return self.bits.astype(dtype)


def _he_conv(r: Stream, cout: int, cin: int, k: int, gain: float = math.sqrt(2.0)) -> np.ndarray:
    fan = cin * k * k
    return (r.normals(cout * fan) * (gain / math.sqrt(fan))).reshape(cout, cin, k, k).astype(np.float32)


class MessageProcessor:
    def __init__(self, surrogate: SurrogateModel, msg_len: int, seed: int):
        if msg_len < 1:
            raise ndiff.ContractError("message length must be positive")
        cfg = surrogate.config
        self.msg_len = msg_len
        self.latent_shape = cfg.latent_shape
        cz, hz, wz = cfg.latent_shape
        wd = cfg.width
        self.msg_channels = cz
        r = stream(seed, "processor")
        p: dict[str, Tensor] = {}

        emb_dim = cz * hz * wz
        p["emb.w"] = Tensor(
            (r.normals(msg_len * emb_dim) / math.sqrt(msg_len)).reshape(msg_len, emb_dim).astype(np.float32),
            requires_grad=True,
        )
        p["emb.b"] = Tensor(np.zeros(emb_dim, dtype=np.float32), requires_grad=True)

        # input conv: clone the decoder's weights on the latent channels,
        # seed the extra message channels
        dec = surrogate.params
        bin_w = np.empty((wd, cz + self.msg_channels, 3, 3), dtype=np.float32)
        bin_w[:, :cz] = dec["dec.in.w"].data
        bin_w[:, cz:] = _he_conv(r, wd, self.msg_channels, 3)
        p["bin.w"] = Tensor(bin_w, requires_grad=True)
        p["bin.b"] = Tensor(dec["dec.in.b"].data.copy(), requires_grad=True)

        for src, dst in (
            ("dec.r1a", "br1a"),
            ("dec.r1b", "br1b"),
            ("dec.r2a", "br2a"),
            ("dec.r2b", "br2b"),
            ("dec.u1", "bu1"),
            ("dec.u2", "bu2"),
        ):
            p[dst + ".w"] = Tensor(dec[src + ".w"].data.copy(), requires_grad=True)
            p[dst + ".b"] = Tensor(dec[src + ".b"].data.copy(), requires_grad=True)

        for i in range(5):
            p[f"gate{i}.w"] = Tensor(np.zeros((wd, wd, 1, 1), dtype=np.float32), requires_grad=True)
            p[f"gate{i}.b"] = Tensor(np.zeros(wd, dtype=np.float32), requires_grad=True)

        self.params = p

    def message_map(self, m: Tensor) -> Tensor:
        """(l,) float bits -> (msg_channels, hz, wz) embedding."""
        cz, hz, wz = self.latent_shape
        row = ndiff.reshape(m, 1, self.msg_len)
        flat = ndiff.matmul(row, self.params["emb.w"]) + self.params["emb.b"]
        return ndiff.reshape(flat, self.msg_channels, hz, wz)

    def branch_stages(self, z: Tensor, m: Tensor) -> list[Tensor]:
        p = self.params
        x = ndiff.concat([z, self.message_map(m)], axis=0)
        b0 = ndiff.relu(ndiff.conv2d(x, p["bin.w"], p["bin.b"], padding=1))
        r = ndiff.conv2d(ndiff.relu(ndiff.conv2d(b0, p["br1a.w"], p["br1a.b"], padding=1)), p["br1b.w"], p["br1b.b"], padding=1)
        b1 = b0 + r
        r = ndiff.conv2d(ndiff.relu(ndiff.conv2d(b1, p["br2a.w"], p["br2a.b"], padding=1)), p["br2b.w"], p["br2b.b"], padding=1)
        b2 = b1 + r
        b3 = ndiff.relu(ndiff.conv2d(ndiff.upsample_nearest2x(b2), p["bu1.w"], p["bu1.b"], padding=1))
        b4 = ndiff.relu(ndiff.conv2d(ndiff.upsample_nearest2x(b3), p["bu2.w"], p["bu2.b"], padding=1))
        return [b0, b1, b2, b3, b4]

    def gate_injections(self, z: Tensor, m: Tensor) -> list[Tensor]:
        p = self.params
        return [
            ndiff.tanh(ndiff.conv2d(b, p[f"gate{i}.w"], p[f"gate{i}.b"]) / GATE_CAP) * GATE_CAP
            for i, b in enumerate(self.branch_stages(z, m))
        ]


def embed(surrogate: SurrogateModel, processor: MessageProcessor, z, m) -> Tensor:
    """Watermarked decode D_m(z, m): the frozen decoder with the processor's
    gate outputs injected at each stage. Differentiable w.r.t. the processor
    parameters (and z / m when given as requires_grad Tensors)."""
    if not isinstance(z, Tensor):
        z = Tensor(np.asarray(z, dtype=np.float32))
    if isinstance(m, Message):
        m = Tensor(m.floats())
    elif not isinstance(m, Tensor):
        m = Tensor(np.asarray(m, dtype=np.float32))
    if m.data.size != processor.msg_len:
        raise ndiff.DimensionError(
            f"message length {m.data.size} != processor's {processor.msg_len}"
        )
    inject = processor.gate_injections(z, m)
    _, img = surrogate.decode_stages(z, inject=inject)
    return img


def _hom_elems(quad_x: list[Tensor], quad_y: list[Tensor]) -> list[Tensor]:
    """Heckbert square-to-quad homography, nine scalar tensors row-major.
    Inputs are the four corner coordinates in unit-square units."""
    x0, x1, x2, x3 = quad_x
    y0, y1, y2, y3 = quad_y
    sx = x0 - x1 + x2 - x3
    sy = y0 - y1 + y2 - y3
    dx1 = x1 - x2
    dy1 = y1 - y2
    dx2 = x3 - x2
    dy2 = y3 - y2
    den = dx1 * dy2 - dy1 * dx2
    g = (sx * dy2 - sy * dx2) / den
    h = (dx1 * sy - dy1 * sx) / den
    one = Tensor(np.ones(1, dtype=x0.data.dtype))
    return [
        x1 - x0 + g * x1, x3 - x0 + h * x3, x0,
        y1 - y0 + g * y1, y3 - y0 + h * y3, y0,
        g, h, one,
    ]


def _adjugate3(m: list[Tensor]) -> list[Tensor]:
    a, b, c, d, e, f, g, h, i = m
    return [
        e * i - f * h, c * h - b * i, b * f - c * e,
        f * g - d * i, a * i - c * g, c * d - a * f,
        d * h - e * g, b * g - a * h, a * e - b * d,
    ]


class Extractor:
    def __init__(self, image_shape: tuple[int, int, int], msg_len: int, seed: int, widths=(16, 32, 32, 32)):
        ci, h, w = image_shape
        if h % 16 or w % 16:
            raise ndiff.ContractError("extractor needs extents divisible by 16")
        self.image_shape = image_shape
        self.msg_len = msg_len
        self.widths = tuple(widths)
        r = stream(seed, "extractor")
        p: dict[str, Tensor] = {}

        p["stn.c1.w"] = Tensor(_he_conv(r, 8, ci, 3), requires_grad=True)
        p["stn.c1.b"] = Tensor(np.zeros(8, dtype=np.float32), requires_grad=True)
        p["stn.c2.w"] = Tensor(_he_conv(r, 8, 8, 3), requires_grad=True)
        p["stn.c2.b"] = Tensor(np.zeros(8, dtype=np.float32), requires_grad=True)
        # zero head: the initial warp is the identity
        p["stn.head.w"] = Tensor(np.zeros((8, 8), dtype=np.float32), requires_grad=True)
        p["stn.head.b"] = Tensor(np.zeros(8, dtype=np.float32), requires_grad=True)

        # classifier input: the rectified image concatenated with a fixed
        # high-pass copy. Image content is orders of magnitude stronger than
        # a low-amplitude residual pattern; the high-pass channels strip most
        # of that content energy so faint patterns stay within reach of the
        # classifier stack instead of drowning in scene structure.
        cin = 2 * ci
        for i, cout in enumerate(self.widths):
            p[f"cls{i}.w"] = Tensor(_he_conv(r, cout, cin, 3), requires_grad=True)
            p[f"cls{i}.b"] = Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True)
            cin = cout
        p["head.w"] = Tensor(
            (HEAD_INIT_GAIN * r.normals(cin * msg_len) / math.sqrt(cin))
            .reshape(cin, msg_len)
            .astype(np.float32),
            requires_grad=True,
        )
        p["head.b"] = Tensor(np.zeros(msg_len, dtype=np.float32), requires_grad=True)
        self.params = p

        box = np.zeros((ci, ci, 3, 3), dtype=np.float32)
        for c in range(ci):
            box[c, c] = 1.0 / 9.0
        self._box = box  # fixed 3x3 mean kernel backing the high-pass stem

        # constant pixel meshes for the warp grid, in unit-square coords
        u, v = np.meshgrid(np.linspace(0.0, 1.0, w), np.linspace(0.0, 1.0, h), indexing="xy")
        self._mesh_u = u.astype(np.float32)
        self._mesh_v = v.astype(np.float32)

    def _p(self, name: str, dtype) -> Tensor:
        """Parameter in the working dtype. float64 copies (used by the
        finite-difference checks) are views for verification only; training
        always runs in the stored float32."""
        t = self.params[name]
        if t.data.dtype == dtype:
            return t
        return Tensor(t.data.astype(dtype))

    def stn_offsets(self, img: Tensor) -> Tensor:
        """Eight corner offsets in pixels, clamped to +-STN_OFFSET_FRAC of
        the short image side."""
        dt = img.data.dtype
        h = ndiff.relu(
            ndiff.conv2d(img, self._p("stn.c1.w", dt), self._p("stn.c1.b", dt), stride=2, padding=1)
        )
        h = ndiff.relu(
            ndiff.conv2d(h, self._p("stn.c2.w", dt), self._p("stn.c2.b", dt), stride=2, padding=1)
        )
        pooled = ndiff.reshape(h.mean(axis=(1, 2)), 1, 8)
        off = ndiff.matmul(pooled, self._p("stn.head.w", dt)) + self._p("stn.head.b", dt)
        lim = STN_OFFSET_FRAC * min(self.image_shape[1], self.image_shape[2])
        return ndiff.reshape(ndiff.clamp(off, -lim, lim), 8)

    def warp_grid(self, offsets: Tensor) -> Tensor:
        """Inverse-homography sampling grid for the given corner offsets.

        Built so that offsets equal to a perspective attack's corner
        displacements undo that attack: the attack maps corner c to sample
        from c + delta, so rectification samples through the inverse of the
        square-to-(corners+delta) homography.
        """
        ci, h, w = self.image_shape
        dt = offsets.data.dtype
        base_x = np.array([0.0, w - 1.0, w - 1.0, 0.0])
        base_y = np.array([0.0, 0.0, h - 1.0, h - 1.0])
        qx = []
        qy = []
        for k in range(4):
            ox = ndiff.narrow(offsets, 0, 2 * k, 1)
            oy = ndiff.narrow(offsets, 0, 2 * k + 1, 1)
            # divide rather than multiply by a reciprocal: zero offsets must
            # land exactly on the unit square so the init warp is an identity
            qx.append((ox + float(base_x[k])) / (w - 1.0))
            qy.append((oy + float(base_y[k])) / (h - 1.0))
        hm = _hom_elems(qx, qy)
        inv = _adjugate3(hm)
        u = Tensor(self._mesh_u.astype(dt))
        v = Tensor(self._mesh_v.astype(dt))
        den = inv[6] * u + inv[7] * v + inv[8]
        px = (inv[0] * u + inv[1] * v + inv[2]) / den
        py = (inv[3] * u + inv[4] * v + inv[5]) / den
        gx = px * 2.0 - 1.0
        gy = py * 2.0 - 1.0
        return ndiff.concat(
            [ndiff.reshape(gx, h, w, 1), ndiff.reshape(gy, h, w, 1)], axis=2
        )

    def rectify(self, img: Tensor) -> Tensor:
        return ndiff.grid_sample(img, self.warp_grid(self.stn_offsets(img)))

    def logits(self, img: Tensor) -> Tensor:
        if img.data.shape != self.image_shape:
            raise ndiff.DimensionError(
                f"image shape {img.data.shape} != {self.image_shape}"
            )
        dt = img.data.dtype
        h = self.rectify(img)
        blur = ndiff.conv2d(ndiff.pad_reflect2d(h, 1), Tensor(self._box.astype(dt)))
        h = ndiff.concat([h, h - blur], axis=0)
        for i in range(len(self.widths)):
            h = ndiff.leaky_relu(
                ndiff.conv2d(h, self._p(f"cls{i}.w", dt), self._p(f"cls{i}.b", dt), stride=2, padding=1),
                alpha=0.2,
            )
        pooled = ndiff.reshape(h.mean(axis=(1, 2)), 1, self.widths[-1])
        out = ndiff.matmul(pooled, self._p("head.w", dt)) + self._p("head.b", dt)
        return ndiff.tanh(ndiff.reshape(out, self.msg_len) / LOGIT_CAP) * LOGIT_CAP


def extract(extractor: Extractor, img) -> Tensor:
    if not isinstance(img, Tensor):
        img = Tensor(np.asarray(img, dtype=np.float32))
    return extractor.logits(img)


def decode_bits(logits: Tensor | np.ndarray) -> np.ndarray:
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return (arr > 0).astype(np.uint8).reshape(-1)


def trainable_params(processor: MessageProcessor, extractor: Extractor) -> dict[str, Tensor]:
    out = {f"proc.{k}": v for k, v in processor.params.items()}
    out.update({f"ext.{k}": v for k, v in extractor.params.items()})
    return out

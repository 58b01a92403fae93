"""Seeded surrogate latent-diffusion generator.

A stand-in for a full latent diffusion stack at desk scale: a frozen
untrained denoiser drives a fixed-step deterministic sampler over 4x8x8
latents, a frozen convolutional decoder maps latents to 3x32x32 images in
[0,1], and a frozen encoder maps images back to latents. All weights are
drawn from named splitmix64 streams of the master seed, so two models built
from the same config are bit-identical.

Distributions:
  free      - denoise(eps) with the empty prompt (no guidance arithmetic)
  cond      - denoise(eps, prompt p, guidance w) over a prompt mixture,
              f_guided = f_uncond + w * (f_cond - f_uncond)
  external  - encode(procedural image), a deliberately mismatched source
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import ndiff
from .ndiff import Tensor
from .rng import Stream, derive, stream

ETA = 0.1  # constant per-step size of the deterministic sampler

# init gains, frozen after a manual sweep so free images span a usable
# dynamic range without saturating the output sigmoid, and so guidance
# shifts the latent cloud without flinging it away (see tests for the
# recorded stats)
_GAIN_RELU = math.sqrt(2.0)
_GAIN_DEN_OUT = 1.0
_GAIN_DEC_OUT = 0.8
_GAIN_ENC_OUT = 1.0
_PROMPT_ROW_SCALE = 0.05  # damps prompt influence inside the denoiser
# the denoiser predicts noise roughly proportional to the current latent
# (as epsilon-predictors do at high noise); the skip makes the sampler
# contract onto a low-dimensional attractor instead of random-walking
_DEN_SKIP = 0.6


@dataclass(frozen=True)
class GeneratorConfig:
    latent_shape: tuple[int, int, int] = (4, 8, 8)
    image_shape: tuple[int, int, int] = (3, 32, 32)
    num_prompts: int = 16
    prompt_dim: int = 32
    steps: int = 30
    guidance: float = 7.5
    width: int = 16
    seed: int = 424242

    def __post_init__(self):
        if self.latent_shape[1] * 4 != self.image_shape[1] or self.latent_shape[2] * 4 != self.image_shape[2]:
            raise ndiff.ContractError("decoder upsamples 4x: image extent must be 4x latent extent")
        if self.steps < 1 or self.num_prompts < 1:
            raise ndiff.ContractError("steps and num_prompts must be positive")


class PromptBank:
    """num_prompts seeded embeddings; the empty prompt is the zero vector."""

    def __init__(self, config: GeneratorConfig):
        r = stream(config.seed, "prompts")
        self.emb = (
            r.normals(config.num_prompts * config.prompt_dim)
            .reshape(config.num_prompts, config.prompt_dim)
            .astype(np.float32)
        )
        self._zero = np.zeros(config.prompt_dim, dtype=np.float32)

    def embedding(self, prompt: int | None) -> np.ndarray:
        if prompt is None:
            return self._zero
        if not 0 <= prompt < self.emb.shape[0]:
            raise ndiff.ContractError(f"prompt id {prompt} out of range")
        return self.emb[prompt]


_BIAS_STD = 0.1  # seeded biases keep decode(0) a nontrivial seed signature


def _conv_par(r: Stream, cout: int, cin: int, k: int, gain: float) -> tuple[np.ndarray, np.ndarray]:
    fan_in = cin * k * k
    w = (r.normals(cout * fan_in) * (gain / math.sqrt(fan_in))).reshape(cout, cin, k, k)
    b = r.normals(cout) * _BIAS_STD
    return w.astype(np.float32), b.astype(np.float32)


def _linear_par(r: Stream, nin: int, nout: int, gain: float) -> tuple[np.ndarray, np.ndarray]:
    w = (r.normals(nin * nout) * (gain / math.sqrt(nin))).reshape(nin, nout)
    b = r.normals(nout) * _BIAS_STD
    return w.astype(np.float32), b.astype(np.float32)


class SurrogateModel:
    """Frozen denoiser U, decoder D, encoder E built from the config seed.

    Call counters (decode_calls, encode_calls, denoise_calls,
    prompt_embedding_uses) exist so training can prove which distributions
    it touched; they are not part of the model state proper.
    """

    def __init__(self, config: GeneratorConfig):
        self.config = config
        self.prompts = PromptBank(config)
        self.counters = {
            "decode_calls": 0,
            "encode_calls": 0,
            "denoise_calls": 0,
            "prompt_embedding_uses": 0,
        }
        cz, hz, wz = config.latent_shape
        ci = config.image_shape[0]
        wd = config.width
        p: dict[str, Tensor] = {}

        def put(name, pair):
            w, b = pair
            p[name + ".w"] = Tensor(w)
            p[name + ".b"] = Tensor(b)

        r = stream(config.seed, "denoiser")
        put("den.c1", _conv_par(r, wd, cz, 3, _GAIN_RELU))
        cw, cb = _linear_par(r, 3 + config.prompt_dim, wd, 1.0)
        cw[3:, :] *= _PROMPT_ROW_SCALE
        put("den.cond", (cw, cb))
        put("den.c2", _conv_par(r, cz, wd, 3, _GAIN_DEN_OUT))

        r = stream(config.seed, "decoder")
        put("dec.in", _conv_par(r, wd, cz, 3, _GAIN_RELU))
        put("dec.r1a", _conv_par(r, wd, wd, 3, _GAIN_RELU))
        put("dec.r1b", _conv_par(r, wd, wd, 3, 1.0))
        put("dec.r2a", _conv_par(r, wd, wd, 3, _GAIN_RELU))
        put("dec.r2b", _conv_par(r, wd, wd, 3, 1.0))
        put("dec.u1", _conv_par(r, wd, wd, 3, _GAIN_RELU))
        put("dec.u2", _conv_par(r, wd, wd, 3, _GAIN_RELU))
        put("dec.out", _conv_par(r, ci, wd, 3, _GAIN_DEC_OUT))

        r = stream(config.seed, "encoder")
        put("enc.c1", _conv_par(r, wd, ci, 3, _GAIN_RELU))
        put("enc.c2", _conv_par(r, wd, wd, 3, _GAIN_RELU))
        put("enc.r1a", _conv_par(r, wd, wd, 3, _GAIN_RELU))
        put("enc.r1b", _conv_par(r, wd, wd, 3, 1.0))
        put("enc.out", _conv_par(r, cz, wd, 3, _GAIN_ENC_OUT))

        self.params = p

    # -- denoiser ----------------------------------------------------------

    def _f(self, z: np.ndarray, t: int, emb: np.ndarray) -> np.ndarray:
        """One denoiser evaluation f(z_t, t, p); frozen, numpy in/out."""
        cfg = self.config
        tf = t / cfg.steps
        cond = np.concatenate(
            [
                np.array([tf, math.sin(2 * math.pi * tf), math.cos(2 * math.pi * tf)], dtype=np.float32),
                emb.astype(np.float32),
            ]
        )
        ct = ndiff.matmul(Tensor(cond[None, :]), self.params["den.cond.w"]) + self.params["den.cond.b"]
        h = ndiff.conv2d(Tensor(z), self.params["den.c1.w"], self.params["den.c1.b"], padding=1)
        h = ndiff.relu(h + ct.reshape(cfg.width, 1, 1))
        out = ndiff.tanh(ndiff.conv2d(h, self.params["den.c2.w"], self.params["den.c2.b"], padding=1))
        return np.float32(_DEN_SKIP) * z + out.data

    def denoise(
        self,
        eps: np.ndarray,
        prompt: int | None = None,
        guidance: float | None = None,
    ) -> np.ndarray:
        """Run the deterministic sampler from noise eps to a latent.

        prompt None short-circuits to the empty embedding, identical to the
        w = 0 conditional path. With a prompt, classifier-free guidance
        combines the conditional and unconditional branches.
        """
        cfg = self.config
        if eps.shape != cfg.latent_shape:
            raise ndiff.DimensionError(f"eps shape {eps.shape} != {cfg.latent_shape}")
        self.counters["denoise_calls"] += 1
        w = cfg.guidance if guidance is None else guidance
        z = eps.astype(np.float32)
        zero = self.prompts.embedding(None)
        if prompt is not None:
            emb = self.prompts.embedding(prompt)
            if np.any(emb != 0):
                self.counters["prompt_embedding_uses"] += 1
        for t in range(cfg.steps, 0, -1):
            if prompt is None:
                f = self._f(z, t, zero)
            else:
                fc = self._f(z, t, emb)
                fu = self._f(z, t, zero)
                f = fu + np.float32(w) * (fc - fu)
            z = z - np.float32(ETA) * f
        return z

    # -- decoder -----------------------------------------------------------

    def decode_stages(
        self, z: Tensor, inject: list | None = None
    ) -> tuple[list[Tensor], Tensor]:
        """Decoder forward returning the five stage activations and the image.

        inject, when given, is a list of five Tensors (or None entries) added
        to the corresponding stage activation before the next stage consumes
        it. This is the seam the message processor drives; the decoder's own
        weights stay frozen either way.
        """
        p = self.params
        if z.data.shape != self.config.latent_shape:
            raise ndiff.DimensionError(f"latent shape {z.data.shape} != {self.config.latent_shape}")
        if inject is None:
            inject = [None] * 5
        if len(inject) != 5:
            raise ndiff.ContractError("decoder has exactly 5 injection stages")

        def plus(h, i):
            return h if inject[i] is None else h + inject[i]

        stages = []
        h = ndiff.relu(ndiff.conv2d(z, p["dec.in.w"], p["dec.in.b"], padding=1))
        h = plus(h, 0)
        stages.append(h)
        r = ndiff.conv2d(ndiff.relu(ndiff.conv2d(h, p["dec.r1a.w"], p["dec.r1a.b"], padding=1)), p["dec.r1b.w"], p["dec.r1b.b"], padding=1)
        h = plus(h + r, 1)
        stages.append(h)
        r = ndiff.conv2d(ndiff.relu(ndiff.conv2d(h, p["dec.r2a.w"], p["dec.r2a.b"], padding=1)), p["dec.r2b.w"], p["dec.r2b.b"], padding=1)
        h = plus(h + r, 2)
        stages.append(h)
        h = ndiff.relu(ndiff.conv2d(ndiff.upsample_nearest2x(h), p["dec.u1.w"], p["dec.u1.b"], padding=1))
        h = plus(h, 3)
        stages.append(h)
        h = ndiff.relu(ndiff.conv2d(ndiff.upsample_nearest2x(h), p["dec.u2.w"], p["dec.u2.b"], padding=1))
        h = plus(h, 4)
        stages.append(h)
        img = ndiff.sigmoid(ndiff.conv2d(h, p["dec.out.w"], p["dec.out.b"], padding=1))
        return stages, img

    def decode(self, z: np.ndarray) -> np.ndarray:
        """Frozen decode, numpy in/out, image in [0,1]."""
        self.counters["decode_calls"] += 1
        _, img = self.decode_stages(Tensor(z.astype(np.float32)))
        return img.data

    # -- encoder -----------------------------------------------------------

    def encode_t(self, img: Tensor) -> Tensor:
        p = self.params
        if img.data.shape != self.config.image_shape:
            raise ndiff.DimensionError(f"image shape {img.data.shape} != {self.config.image_shape}")
        h = ndiff.relu(ndiff.conv2d(img, p["enc.c1.w"], p["enc.c1.b"], stride=2, padding=1))
        h = ndiff.relu(ndiff.conv2d(h, p["enc.c2.w"], p["enc.c2.b"], stride=2, padding=1))
        r = ndiff.conv2d(ndiff.relu(ndiff.conv2d(h, p["enc.r1a.w"], p["enc.r1a.b"], padding=1)), p["enc.r1b.w"], p["enc.r1b.b"], padding=1)
        h = h + r
        return ndiff.conv2d(h, p["enc.out.w"], p["enc.out.b"], padding=1)

    def encode(self, img: np.ndarray) -> np.ndarray:
        self.counters["encode_calls"] += 1
        return self.encode_t(Tensor(img.astype(np.float32))).data

    # -- bookkeeping --------------------------------------------------------

    def decoder_param_hash(self) -> str:
        """SHA-256 over the frozen decoder weights, for tamper checks."""
        h = hashlib.sha256()
        for name in sorted(self.params):
            if name.startswith("dec."):
                h.update(name.encode())
                h.update(np.ascontiguousarray(self.params[name].data, dtype=np.float32).tobytes())
        return h.hexdigest()

    def reset_counters(self) -> None:
        for k in self.counters:
            self.counters[k] = 0


def sample_external_image(r: Stream, shape: tuple[int, int, int] = (3, 32, 32)) -> np.ndarray:
    """Procedural stand-in for an external dataset image.

    Smooth color gradient, one to four solid rectangles or ellipses, then a
    touch of noise. Values in [0,1]. Deliberately nothing like the decoder's
    output manifold.
    """
    c, h, w = shape
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    img = np.empty(shape, dtype=np.float64)
    for ch in range(c):
        a, bx, by, bxy = r.uniforms(4) * 2 - 1
        g = a + bx * xx + by * yy + bxy * xx * yy
        lo, hi = g.min(), g.max()
        img[ch] = 0.2 + 0.6 * (g - lo) / max(hi - lo, 1e-9)
    n_shapes = r.integer(1, 5)
    for _ in range(n_shapes):
        color = r.uniforms(c)
        cx, cy = r.uniforms(2)
        rx, ry = 0.08 + 0.25 * r.uniforms(2)
        kind = r.integer(0, 2)
        if kind == 0:  # rectangle
            mask = (np.abs(xx - cx) < rx) & (np.abs(yy - cy) < ry)
        else:  # ellipse
            mask = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 < 1.0
        alpha = 0.5 + 0.5 * r.uniform()
        for ch in range(c):
            img[ch][mask] = (1 - alpha) * img[ch][mask] + alpha * color[ch]
    img += 0.02 * r.normals(c * h * w).reshape(shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def sample_latent(
    model: SurrogateModel,
    kind: str,
    seed: int,
    index: int,
    guidance: float | None = None,
) -> np.ndarray:
    """Latent number `index` of the (seed, kind) distribution draw.

    Depends only on (seed, kind, index), so pools and streams built from the
    same coordinates agree element-wise.
    """
    cfg = model.config
    if kind not in ("free", "cond", "external"):
        raise ndiff.ContractError(f"unknown distribution kind {kind!r}")
    r = stream(seed, "dist", kind, index)
    if kind == "external":
        img = sample_external_image(r, cfg.image_shape)
        return model.encode(img)
    nz = int(np.prod(cfg.latent_shape))
    eps = r.normals(nz).reshape(cfg.latent_shape).astype(np.float32)
    if kind == "free":
        return model.denoise(eps, prompt=None)
    prompt = index % cfg.num_prompts
    return model.denoise(eps, prompt=prompt, guidance=guidance)


def sample_distribution(
    model: SurrogateModel,
    kind: str,
    n: int,
    seed: int,
    guidance: float | None = None,
) -> np.ndarray:
    """Draw n latents from one of the three source distributions.

    kind "free": empty-prompt denoised latents. kind "cond": prompts cycle
    through the bank (a uniform mixture), guided at `guidance` (config
    default if None). kind "external": encoded procedural images. Returns
    (n, *latent_shape) float32. Sample i depends only on (seed, kind, i).
    """
    cfg = model.config
    out = np.empty((n,) + cfg.latent_shape, dtype=np.float32)
    for i in range(n):
        out[i] = sample_latent(model, kind, seed, i, guidance=guidance)
    return out

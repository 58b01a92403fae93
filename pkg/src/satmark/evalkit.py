"""Fidelity, robustness, detection, and identification metrics.

The evaluation protocol mirrors deployment: networks are trained on one
latent distribution but scored here on conditionally generated (prompted)
latents, with every attack applied at full strength. Detection statistics
use the matched-bit count against the claimed key with an exact binomial
null; identification scans a bit-packed key pool with XOR + popcount.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import ndiff
from .attacks import KINDS, AttackRanges, AttackSpec, apply, gaussian_kernel7
from .featnet import FeatureNet
from .ndiff import Tensor
from .rng import Stream, derive, stream
from .toygen import SurrogateModel, sample_latent
from .wmnet import Extractor, Message, MessageProcessor, decode_bits, embed

# JSON field suffixes for the seven attack kinds, fixed report order
_KIND_FIELD = {
    "blur": "blur",
    "gauss_noise": "noise",
    "brightness": "brightness",
    "contrast": "contrast",
    "desaturate": "desat",
    "perspective": "perspective",
    "jpeg": "jpeg",
}


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ndiff.DimensionError(f"shape mismatch {a.shape} vs {b.shape}")
    for side in (a, b):
        if side.min() < -1e-6 or side.max() > 1 + 1e-6:
            raise ndiff.ContractError("metric inputs must lie in [0, 1]")


def psnr(a, b) -> float:
    """-10*log10(MSE) for images in [0,1]; identical inputs give +inf."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return -10.0 * math.log10(mse)


def ssim(a, b) -> float:
    """Mean SSIM over channels and valid 7x7 window positions (sigma 1.5,
    C1=0.01^2, C2=0.03^2, dynamic range 1)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_pair(a, b)
    if a.ndim == 2:
        a = a[None]
        b = b[None]
    if a.ndim != 3:
        raise ndiff.DimensionError(f"ssim expects (C, H, W) or (H, W), got {a.shape}")
    _, h, w = a.shape
    if h < 7 or w < 7:
        raise ndiff.ContractError(f"image {h}x{w} smaller than the 7x7 ssim window")
    g = gaussian_kernel7(1.5, np.float64)
    c1 = 0.01 ** 2
    c2 = 0.03 ** 2

    def stats(x):
        win = np.lib.stride_tricks.sliding_window_view(x, (7, 7), axis=(1, 2))
        return np.einsum("chwij,ij->chw", win, g)

    mu_a = stats(a)
    mu_b = stats(b)
    aa = stats(a * a) - mu_a * mu_a
    bb = stats(b * b) - mu_b * mu_b
    ab = stats(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * ab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (aa + bb + c2)
    return float(np.mean(num / den))


def _psd_sqrt(s: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(s)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_feature_distance(feats_a, feats_b) -> float:
    """Frechet distance between Gaussians fitted to two feature sets
    (rows = samples). Square roots by symmetric eigendecomposition with
    negative eigenvalues clamped to zero."""
    fa = np.asarray(feats_a, dtype=np.float64)
    fb = np.asarray(feats_b, dtype=np.float64)
    if fa.ndim != 2 or fb.ndim != 2 or fa.shape[1] != fb.shape[1]:
        raise ndiff.DimensionError(f"feature matrices {fa.shape} vs {fb.shape}")
    if fa.shape[1] == 0:
        raise ndiff.ContractError("feature dimension is zero")
    if fa.shape[0] < 2 or fb.shape[0] < 2:
        raise ndiff.ContractError("need at least 2 samples per side")
    mu_a = fa.mean(axis=0)
    mu_b = fb.mean(axis=0)
    cov_a = np.cov(fa, rowvar=False, ddof=1)
    cov_b = np.cov(fb, rowvar=False, ddof=1)
    cov_a = np.atleast_2d(cov_a)
    cov_b = np.atleast_2d(cov_b)
    root_a = _psd_sqrt(cov_a)
    cross = _psd_sqrt(root_a @ cov_b @ root_a)
    d2 = float(np.sum((mu_a - mu_b) ** 2))
    d2 += float(np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(cross))
    return max(d2, 0.0)


def bit_accuracy(m, m_prime) -> float:
    a = np.asarray(m).ravel()
    b = np.asarray(m_prime).ravel()
    if a.size != b.size:
        raise ndiff.DimensionError(f"bit vectors {a.size} vs {b.size}")
    return float(np.mean(a == b))


def roc_auc(pos_scores, neg_scores) -> float:
    """Mann-Whitney AUC with half credit for ties (pair counting)."""
    pos = np.asarray(pos_scores, dtype=np.float64).ravel()
    neg = np.asarray(neg_scores, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise ndiff.ContractError("roc_auc needs nonempty score sets")
    diff = pos[:, None] - neg[None, :]
    wins = np.count_nonzero(diff > 0)
    ties = np.count_nonzero(diff == 0)
    return (wins + 0.5 * ties) / (pos.size * neg.size)


def binomial_fpr(tau: int, l: int) -> float:
    """P(matched bits >= tau) for a uniformly random l-bit key, exact
    (integer tail sum converted once to float)."""
    if not 0 <= tau <= l:
        raise ndiff.ContractError(f"threshold {tau} outside [0, {l}]")
    tail = sum(math.comb(l, k) for k in range(tau, l + 1))
    return float(Fraction(tail, 2 ** l))


def threshold_for_fpr(l: int, target: float) -> int:
    """Smallest tau with binomial_fpr(tau, l) <= target."""
    if target < 0:
        raise ndiff.ContractError("target FPR must be nonnegative")
    for tau in range(l + 1):
        if binomial_fpr(tau, l) <= target:
            return tau
    raise ndiff.ContractError(
        f"no threshold reaches FPR {target} with {l} bits (min is 2^-{l})"
    )


def tpr_at_fpr(pos_scores, l: int, target_fpr: float) -> float:
    """Fraction of positive matched-bit scores at or above the analytic
    threshold for the target FPR."""
    tau = threshold_for_fpr(l, target_fpr)
    pos = np.asarray(pos_scores).ravel()
    if pos.size == 0:
        raise ndiff.ContractError("tpr_at_fpr needs positive scores")
    return float(np.mean(pos >= tau))


# -- identification ----------------------------------------------------------


def _pack_bits(bits: np.ndarray) -> np.ndarray:
    """(n, l) 0/1 -> (n, ceil(l/64)) uint64, bit j*64+k at word j bit k."""
    n, l = bits.shape
    words = (l + 63) // 64
    out = np.zeros((n, words), dtype=np.uint64)
    for j in range(words):
        chunk = bits[:, j * 64 : (j + 1) * 64].astype(np.uint64)
        shifts = np.arange(chunk.shape[1], dtype=np.uint64)
        out[:, j] = (chunk << shifts).sum(axis=1, dtype=np.uint64)
    return out


class KeyPool:
    """n distinct l-bit user keys, bit-packed for fast Hamming scans."""

    def __init__(self, n: int, l: int, seed: int):
        if n < 1 or l < 1:
            raise ndiff.ContractError("pool size and key length must be positive")
        if n > 2 ** min(l - 1, 62):
            raise ndiff.ContractError(
                f"pool of {n} keys cannot stay distinct at {l} bits"
            )
        self.n = n
        self.l = l
        self.seed = seed
        r = stream(seed, "keypool")
        words = (l + 63) // 64
        raw = self._draw(r, n, l)
        packed = _pack_bits(raw)
        seen: dict[bytes, int] = {}
        for i in range(n):
            key = packed[i].tobytes()
            while key in seen:
                row = self._draw(r, 1, l)
                packed[i] = _pack_bits(row)[0]
                key = packed[i].tobytes()
            seen[key] = i
        self.packed = packed
        assert self.packed.shape == (n, words)

    @staticmethod
    def _draw(r: Stream, n: int, l: int) -> np.ndarray:
        u = r.uniforms(n * l).reshape(n, l)
        return (u < 0.5).astype(np.uint8)

    def key_bits(self, i: int) -> np.ndarray:
        """Unpacked l-bit key for user i."""
        w = self.packed[i]
        idx = np.arange(self.l, dtype=np.uint64)
        return ((w[idx // 64] >> (idx % 64)) & 1).astype(np.uint8)


def identify(decoded, pool: KeyPool) -> int:
    """Index of the pool key nearest in Hamming distance to the decoded
    message; ties resolve to the lowest index."""
    if isinstance(decoded, Message):
        bits = decoded.bits
    else:
        bits = np.asarray(decoded, dtype=np.uint8).ravel()
    if bits.size != pool.l:
        raise ndiff.ContractError(f"decoded length {bits.size} != pool keys {pool.l}")
    q = _pack_bits(bits[None, :])[0]
    dist = np.bitwise_count(pool.packed ^ q[None, :]).sum(axis=1)
    return int(np.argmin(dist))


def hamming_naive(bits_a: np.ndarray, bits_b: np.ndarray) -> int:
    return int(np.count_nonzero(np.asarray(bits_a) != np.asarray(bits_b)))


# -- full evaluation ---------------------------------------------------------


@dataclass(frozen=True)
class MetricsReport:
    psnr_db: float  # may be +inf when every pair is identical
    ssim: float
    ffd: float
    bit_accuracy: dict[str, float]  # "none", the seven kinds, "adv"
    n: int

    def to_json(self) -> str:
        """Fixed field order, 9 significant digits; +inf psnr serializes as
        null plus a psnr_infinite marker."""
        fields: list[tuple[str, object]] = []
        if math.isinf(self.psnr_db):
            fields.append(("psnr_db", None))
        else:
            fields.append(("psnr_db", self.psnr_db))
        fields.append(("ssim", self.ssim))
        fields.append(("ffd", self.ffd))
        fields.append(("acc_none", self.bit_accuracy["none"]))
        for kind in KINDS:
            fields.append((f"acc_{_KIND_FIELD[kind]}", self.bit_accuracy[kind]))
        fields.append(("acc_adv", self.bit_accuracy["adv"]))
        fields.append(("n", self.n))
        if math.isinf(self.psnr_db):
            fields.append(("psnr_infinite", True))
        parts = []
        for name, value in fields:
            if value is None:
                enc = "null"
            elif isinstance(value, bool):
                enc = "true" if value else "false"
            elif isinstance(value, int):
                enc = str(value)
            else:
                enc = f"{value:.9g}"
            parts.append(f'"{name}": {enc}')
        return "{" + ", ".join(parts) + "}"


def evaluate(
    surrogate: SurrogateModel,
    processor: MessageProcessor,
    extractor: Extractor,
    n: int,
    seed: int,
    ranges: AttackRanges | None = None,
    guidance: float | None = None,
) -> MetricsReport:
    """Score a trained pair on n conditionally generated latents: fidelity
    between plain and watermarked decodes, then bit accuracy clean and under
    each attack at full strength with seeded intensities."""
    if n < 1:
        raise ndiff.ContractError("evaluation needs n >= 1")
    ranges = ranges or AttackRanges()
    featnet = FeatureNet()
    latent_seed = derive(seed, "eval-latents")
    psnrs: list[float] = []
    ssims: list[float] = []
    feats_o: list[np.ndarray] = []
    feats_w: list[np.ndarray] = []
    correct = {k: 0 for k in ("none", *KINDS)}
    total_bits = 0
    msg_len = processor.msg_len
    for i in range(n):
        z = sample_latent(surrogate, "cond", latent_seed, i, guidance=guidance)
        m = Message.random(stream(seed, "eval-msg", i), msg_len)
        zt = Tensor(z)
        _, original = surrogate.decode_stages(zt)
        marked = embed(surrogate, processor, zt, m)
        psnrs.append(psnr(original.data, marked.data))
        ssims.append(ssim(original.data, marked.data))
        feats_o.append(featnet.features(original.data))
        feats_w.append(featnet.features(marked.data))
        total_bits += msg_len
        correct["none"] += int(np.sum(decode_bits(extractor.logits(marked)) == m.bits))
        for k_idx, kind in enumerate(KINDS):
            r = stream(seed, "eval-att", i, k_idx)
            lo, hi = ranges.of(kind)
            spec = AttackSpec(
                kind=kind,
                intensity=float(r.uniform(lo, hi)),
                gamma=1.0,
                seed=int(r.u64(1)[0]),
            )
            attacked = apply(marked, spec)
            correct[kind] += int(np.sum(decode_bits(extractor.logits(attacked)) == m.bits))
    acc = {k: correct[k] / total_bits for k in correct}
    acc["adv"] = float(np.mean([acc[k] for k in KINDS]))
    mean_psnr = math.inf if any(math.isinf(p) for p in psnrs) and all(
        math.isinf(p) for p in psnrs
    ) else float(np.mean([p for p in psnrs if not math.isinf(p)] or [math.inf]))
    return MetricsReport(
        psnr_db=mean_psnr,
        ssim=float(np.mean(ssims)),
        ffd=frechet_feature_distance(np.stack(feats_o), np.stack(feats_w)),
        bit_accuracy=acc,
        n=n,
    )

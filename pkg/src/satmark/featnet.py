"""Fixed seeded feature extractor.

Three strided conv stages, weights frozen at construction. The perceptual
image-loss term runs on its per-stage feature maps (differentiably); the
Frechet feature distance pools its last stage. Random frozen features are a
crude but honest stand-in for a pretrained perceptual net at this scale.
"""

from __future__ import annotations

import math

import numpy as np

from . import ndiff
from .ndiff import Tensor
from .rng import stream

DEFAULT_FEAT_SEED = 916191


class FeatureNet:
    def __init__(self, seed: int = DEFAULT_FEAT_SEED, in_channels: int = 3, widths: tuple[int, ...] = (8, 16, 32)):
        self.seed = seed
        self.widths = tuple(widths)
        self.params: dict[str, Tensor] = {}
        cin = in_channels
        r = stream(seed, "featnet")
        for i, cout in enumerate(self.widths):
            fan = cin * 9
            w = (r.normals(cout * fan) * math.sqrt(2.0 / fan)).reshape(cout, cin, 3, 3)
            b = r.normals(cout) * 0.1
            self.params[f"f{i}.w"] = Tensor(w.astype(np.float32))
            self.params[f"f{i}.b"] = Tensor(b.astype(np.float32))
            cin = cout

    def stages_t(self, img: Tensor) -> list[Tensor]:
        """Per-stage feature maps, differentiable w.r.t. img."""
        h = img
        out = []
        for i in range(len(self.widths)):
            w = self.params[f"f{i}.w"]
            b = self.params[f"f{i}.b"]
            if w.dtype != img.dtype:
                # frozen weights follow the caller's dtype (float64 for
                # finite-difference verification)
                w = Tensor(w.data.astype(img.data.dtype))
                b = Tensor(b.data.astype(img.data.dtype))
            h = ndiff.leaky_relu(
                ndiff.conv2d(h, w, b, stride=2, padding=1),
                alpha=0.2,
            )
            out.append(h)
        return out

    def features(self, img: np.ndarray) -> np.ndarray:
        """Pooled last-stage feature vector (widths[-1],), numpy in/out."""
        maps = self.stages_t(Tensor(np.asarray(img, dtype=np.float32)))
        return maps[-1].data.mean(axis=(1, 2))

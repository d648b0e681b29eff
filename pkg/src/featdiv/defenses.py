"""Input-preprocessing defenses applied on the target's side at evaluation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attacks import _resize_pad_index_map
from .seeding import defense_rng


@dataclass
class DefenseSpec:
    kind: str = "none"  # none | bit_red | resize_pad
    bits: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("none", "bit_red", "resize_pad"):
            raise ValueError(f"unknown defense kind {self.kind!r}")
        if self.kind == "bit_red" and not 1 <= self.bits <= 8:
            raise ValueError(f"bits must lie in [1,8], got {self.bits}")

    def label(self) -> str:
        return f"bit_red({self.bits})" if self.kind == "bit_red" else self.kind


def bit_depth_reduce(x: np.ndarray, bits: int) -> np.ndarray:
    """Quantize pixels in [0,1] to 2^bits levels. Idempotent at fixed bits."""
    if not 1 <= bits <= 8:
        raise ValueError(f"bits must lie in [1,8], got {bits}")
    levels = float(2**bits - 1)
    return np.round(np.asarray(x) * levels) / levels


def random_resize_pad(x: np.ndarray, rng=None, seed: int = 0) -> np.ndarray:
    """Defender-side random resize-and-pad; same transform family as the
    attacker's diverse-input method but drawn from the defender's seed.

    rng is a Generator, a sequence of per-image Generators, or None to derive
    per-image generators from seed.
    """
    x = np.asarray(x)
    n, _, h, w = x.shape
    if rng is None:
        rng = [defense_rng(seed, i) for i in range(n)]
    out = np.empty_like(x)
    per_sample = not isinstance(rng, np.random.Generator)
    for i in range(n):
        row, col, valid = _resize_pad_index_map(h, w, rng[i] if per_sample else rng)
        out[i] = x[i][:, row, col] * valid
    return out


def apply_defense(images: np.ndarray, spec: DefenseSpec, image_indices=None) -> np.ndarray:
    if spec.kind == "none":
        return images
    if spec.kind == "bit_red":
        return bit_depth_reduce(images, spec.bits)
    if image_indices is None:
        image_indices = np.arange(len(images))
    rngs = [defense_rng(spec.seed, int(gi)) for gi in image_indices]
    return random_resize_pad(images, rngs)

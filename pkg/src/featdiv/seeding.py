"""Hierarchical deterministic RNG derivation.

Every random draw in an experiment comes from a generator keyed by
(master_seed, *path), so results never depend on execution order, batch
composition, or worker count.
"""

from __future__ import annotations

import numpy as np

# Fixed salts keep generators for different purposes statistically
# independent even when their integer paths collide.
_SALT_ATTACK = 0x41544B
_SALT_DHF = 0x444846
_SALT_GHOST = 0x47484F
_SALT_DEFENSE = 0x444546


def derive_rng(master_seed: int, *path: int) -> np.random.Generator:
    """Generator keyed by the master seed plus a tuple of integer indices."""
    return np.random.default_rng(np.random.SeedSequence((int(master_seed),) + tuple(int(p) for p in path)))


def attack_rng(master_seed: int, image_index: int, iteration: int) -> np.random.Generator:
    """Per-image, per-iteration stream for input transformations (DIM)."""
    return derive_rng(master_seed, _SALT_ATTACK, image_index, iteration)


def dhf_site_rng(master_seed: int, image_index: int, iteration: int, site_index: int) -> np.random.Generator:
    """Per-image, per-iteration, per-site stream for feature diversification."""
    return derive_rng(master_seed, _SALT_DHF, image_index, iteration, site_index)


def ghost_site_rng(master_seed: int, image_index: int, iteration: int, site_index: int) -> np.random.Generator:
    return derive_rng(master_seed, _SALT_GHOST, image_index, iteration, site_index)


def defense_rng(master_seed: int, image_index: int) -> np.random.Generator:
    return derive_rng(master_seed, _SALT_DEFENSE, image_index)

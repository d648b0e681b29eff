"""Feature diversification on the surrogate's upper layers.

Two operations applied at selected hook sites during the adversarial forward
pass: convex mixup of the current features with cached benign features, and
replacement of a random fraction of elements with the feature-map mean. The
mean-replacement stays inside the differentiated graph, so each replaced
position spreads gradient 1/n over every pre-replacement element.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .models import Model
from .seeding import dhf_site_rng, ghost_site_rng

SiteRngFactory = Callable[[int, int], np.random.Generator]


@dataclass
class DhfConfig:
    eta_max: float = 0.2
    rho: float = 0.1
    layer_ratio: float = 5.0 / 6.0
    master_seed: int = 0

    def __post_init__(self):
        for field in ("eta_max", "rho", "layer_ratio"):
            v = getattr(self, field)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"DhfConfig.{field} must lie in [0,1], got {v}")


def select_hook_layers(model: Model, layer_ratio: float) -> list[str]:
    """The last ceil(layer_ratio * S) of the model's S hook sites, in order."""
    if not 0.0 <= layer_ratio <= 1.0:
        raise ValueError(f"layer_ratio must lie in [0,1], got {layer_ratio}")
    s = len(model.hook_sites)
    # epsilon guards against 5/6*12 = 10.000000000000002 ceiling up to 11
    k = math.ceil(layer_ratio * s - 1e-9)
    return model.hook_sites[s - k :] if k else []


def capture_benign_features(model: Model, x: np.ndarray, selected_sites) -> dict[str, np.ndarray]:
    """One clean forward pass; detached copies of the selected sites' features.

    Computed once per benign batch and reused across every attack iteration.
    """
    unknown = [s for s in selected_sites if s not in model.hook_sites]
    if unknown:
        raise KeyError(f"sites not in model: {unknown}")
    collected = {s: None for s in selected_sites}
    model.forward(Tensor(x), collected=collected)
    return collected


def mixup_features(y_adv: Tensor, y_benign, eta) -> Tensor:
    """(1-eta) * y_adv + eta * y_benign with the benign branch detached.

    eta may be a scalar or a per-sample array broadcastable to the features.
    """
    benign = y_benign.data if isinstance(y_benign, Tensor) else np.asarray(y_benign)
    if benign.shape != y_adv.shape:
        raise ad.DimensionError(
            f"mixup_features: shapes {y_adv.shape} and {benign.shape} differ"
        )
    eta = np.asarray(eta, dtype=np.float64)
    keep = 1.0 - eta
    out_data = y_adv.data * keep
    out_data += eta * benign

    def backward_fn(g):
        ad._accumulate(y_adv, g * keep)

    return ad._result(out_data, (y_adv,), backward_fn)


def _masked_mean_replace(y: Tensor, mask: np.ndarray) -> Tensor:
    """Replace masked positions with their feature map's mean, differentiably.

    The mean is per feature map: over the spatial extent of each channel for
    convolutional features, over the remaining axis for flat features. Each
    replaced position spreads gradient 1/n to every element of its map.
    """
    axes = tuple(range(2, y.data.ndim)) if y.data.ndim > 2 else (1,)
    n_map = int(np.prod([y.shape[a] for a in axes]))
    mean = y.data.mean(axis=axes, keepdims=True)
    out_data = np.where(mask, mean, y.data)

    def backward_fn(g):
        g_mean = (g * mask).sum(axis=axes, keepdims=True) / n_map
        ad._accumulate(y, g * ~mask + g_mean)

    return ad._result(out_data, (y,), backward_fn)


def _draw_mask(shape, rho: float, rng) -> np.ndarray:
    """floor(rho*n) positions per sample, uniform without replacement.

    rng is one Generator for the whole batch or a sequence of per-sample
    Generators.
    """
    mask = np.zeros(shape, dtype=bool)
    n_feat = int(np.prod(shape[1:]))
    k = int(math.floor(rho * n_feat + 1e-9))
    if k == 0:
        return mask
    per_sample = not isinstance(rng, np.random.Generator)
    for i in range(shape[0]):
        r = rng[i] if per_sample else rng
        mask[i].reshape(-1)[r.choice(n_feat, size=k, replace=False)] = True
    return mask


def mean_replace(y: Tensor, rho: float, rng) -> Tensor:
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must lie in [0,1], got {rho}")
    return _masked_mean_replace(y, _draw_mask(y.shape, rho, rng))


def iteration_rng_factory(master_seed: int, iteration: int, image_indices=None) -> SiteRngFactory:
    """Per-(site, batch-row) generators keyed by the image's global index."""

    def rng_for(site_index: int, row: int) -> np.random.Generator:
        img = int(image_indices[row]) if image_indices is not None else row
        return dhf_site_rng(master_seed, img, iteration, site_index)

    return rng_for


def dhf_forward(model: Model, x_adv: Tensor, cache: dict[str, np.ndarray],
                config: DhfConfig, iteration_rng: SiteRngFactory) -> Tensor:
    """Forward pass with mixup-then-mean-replacement at the selected sites.

    iteration_rng(site_index, row) supplies a fresh generator per site and
    batch row; eta is drawn first, then the replacement mask.
    """
    selected = select_hook_layers(model, config.layer_ratio)
    missing = [s for s in selected if s not in cache]
    if missing:
        raise KeyError(f"benign cache missing sites {missing} (stale cache?)")
    site_index = {s: i for i, s in enumerate(model.hook_sites)}

    def transform(h: Tensor, site_name: str) -> Tensor:
        idx = site_index[site_name]
        n = h.shape[0]
        rngs = [iteration_rng(idx, row) for row in range(n)]
        bshape = (n,) + (1,) * (h.data.ndim - 1)
        etas = np.array([r.uniform(0.0, config.eta_max) for r in rngs]).reshape(bshape)
        h = mixup_features(h, cache[site_name], etas)
        return _masked_mean_replace(h, _draw_mask(h.shape, config.rho, rngs))

    return model.forward(x_adv, site_transforms={s: transform for s in selected})


def ghost_dropout_forward(model: Model, x_adv: Tensor, drop_prob: float, rng) -> Tensor:
    """Ghost-network baseline: inverted dropout densely at every hook site.

    rng is a Generator (batch-level draws) or a (site_index, row) factory as
    for dhf_forward.
    """
    if not 0.0 <= drop_prob < 1.0:
        raise ValueError(f"drop_prob must lie in [0,1), got {drop_prob}")
    site_index = {s: i for i, s in enumerate(model.hook_sites)}
    keep = 1.0 - drop_prob

    def transform(h: Tensor, site_name: str) -> Tensor:
        if drop_prob == 0.0:
            return h
        if isinstance(rng, np.random.Generator):
            mask = rng.random(h.shape) >= drop_prob
        else:
            idx = site_index[site_name]
            mask = np.empty(h.shape, dtype=bool)
            for row in range(h.shape[0]):
                mask[row] = rng(idx, row).random(h.shape[1:]) >= drop_prob
        return ad.scale(h, mask / keep)

    return model.forward(x_adv, site_transforms={s: transform for s in model.hook_sites})


def ghost_rng_factory(master_seed: int, iteration: int, image_indices=None) -> SiteRngFactory:
    def rng_for(site_index: int, row: int) -> np.random.Generator:
        img = int(image_indices[row]) if image_indices is not None else row
        return ghost_site_rng(master_seed, img, iteration, site_index)

    return rng_for

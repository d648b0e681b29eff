"""Sensitivity analyses: masking-accuracy sweeps and per-layer Hessian traces.

The masking sweep measures how much accuracy survives when a fraction of
high-level feature elements is replaced (desk-scale heatmap). The Hessian
trace uses Hutchinson's estimator over Rademacher probes with central-
difference Hessian-vector products, which only needs first-order gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dhf import mean_replace, select_hook_layers
from .models import Model, accuracy
from .data import Dataset
from .seeding import derive_rng

_SALT_MASK = 0x4D534B
_SALT_PROBE = 0x505242


@dataclass
class MaskSweepReport:
    ratio_grid: list[float]
    rho_grid: list[float]
    accuracy: np.ndarray  # [len(ratio_grid), len(rho_grid)]
    clean_accuracy: float
    trials: int
    mode: str
    model_id: str = ""
    dataset_id: str = ""

    def rows(self):
        """One (layer_ratio, mask_fraction, accuracy) row per grid cell."""
        for i, r in enumerate(self.ratio_grid):
            for j, p in enumerate(self.rho_grid):
                yield r, p, float(self.accuracy[i, j])


def mask_accuracy_sweep(
    model: Model,
    dataset: Dataset,
    rho_grid,
    ratio_grid,
    trials: int = 3,
    seed: int = 0,
    mode: str = "mean",
    batch_size: int = 256,
) -> MaskSweepReport:
    """Average accuracy under random masking of the last layer_ratio of hook
    sites, for every (layer_ratio, rho) grid cell.

    mode "mean" replaces masked elements with their feature map's mean
    (consistent with the diversification operation); mode "zero" zeroes them.
    """
    if mode not in ("mean", "zero"):
        raise ValueError(f"mode must be 'mean' or 'zero', got {mode!r}")
    clean = accuracy(model, dataset, batch_size)
    acc = np.empty((len(ratio_grid), len(rho_grid)))
    for i, ratio in enumerate(ratio_grid):
        sites = select_hook_layers(model, ratio)
        for j, rho in enumerate(rho_grid):
            if rho == 0.0 or not sites:
                acc[i, j] = clean
                continue
            cell = []
            for trial in range(trials):
                rng = derive_rng(seed, _SALT_MASK, i, j, trial)

                def transform(h, site_name, rng=rng):
                    if mode == "mean":
                        return mean_replace(h, rho, rng)
                    n_feat = int(np.prod(h.shape[1:]))
                    k = int(np.floor(rho * n_feat + 1e-9))
                    mask = np.ones(h.shape)
                    for b in range(h.shape[0]):
                        mask[b].reshape(-1)[rng.choice(n_feat, k, replace=False)] = 0.0
                    return ad.scale(h, mask)

                transforms = {s: transform for s in sites}
                correct = 0
                for start in range(0, len(dataset), batch_size):
                    imgs = dataset.images[start : start + batch_size]
                    labels = dataset.labels[start : start + batch_size]
                    logits = model.forward(Tensor(imgs), site_transforms=transforms)
                    correct += int((np.argmax(logits.data, axis=1) == labels).sum())
                cell.append(correct / len(dataset))
            acc[i, j] = float(np.mean(cell))
    return MaskSweepReport(list(ratio_grid), list(rho_grid), acc, clean, trials, mode)


# -- Hessian trace -----------------------------------------------------------


GradFn = Callable[[np.ndarray], np.ndarray]


@dataclass
class TraceEstimate:
    estimate: float
    stderr: float
    num_probes: int
    dim: int


@dataclass
class SensitivityReport:
    sites: list[str]
    estimates: list[TraceEstimate] = field(default_factory=list)

    def rows(self):
        for site, est in zip(self.sites, self.estimates):
            yield site, est.dim, est.estimate, est.stderr, est.num_probes


def hessian_vector_product(grad_fn: GradFn, theta: np.ndarray, v: np.ndarray,
                           h_base: float = 1e-4) -> np.ndarray:
    """Central-difference H @ v: (grad(theta+hv) - grad(theta-hv)) / 2h."""
    theta = np.asarray(theta, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if theta.shape != v.shape:
        raise ad.DimensionError(f"hvp: theta {theta.shape} vs v {v.shape}")
    h = h_base * (1.0 + np.abs(theta).max())
    out = (grad_fn(theta + h * v) - grad_fn(theta - h * v)) / (2.0 * h)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite Hessian-vector product")
    return out


def avg_hessian_trace(grad_fn: GradFn, dim: int, num_probes: int = 32,
                      seed: int = 0, theta: np.ndarray | None = None) -> TraceEstimate:
    """Hutchinson estimate of Tr(H)/dim with Rademacher probes, plus its
    sample standard error."""
    if num_probes < 2:
        raise ValueError("num_probes must be at least 2")
    if theta is None:
        theta = np.zeros(dim)
    samples = np.empty(num_probes)
    for p in range(num_probes):
        rng = derive_rng(seed, _SALT_PROBE, p)
        v = rng.integers(0, 2, size=dim) * 2.0 - 1.0
        samples[p] = float(v @ hessian_vector_product(grad_fn, theta, v)) / dim
    return TraceEstimate(
        float(samples.mean()),
        float(samples.std(ddof=1) / np.sqrt(num_probes)),
        num_probes,
        dim,
    )


def layer_grad_fn(model: Model, batch_images: np.ndarray, batch_labels: np.ndarray,
                  site: str) -> tuple[GradFn, np.ndarray]:
    """Loss-gradient function over one hook layer's convolution weights.

    Returns (grad_fn, theta0) where theta0 is the current flattened weight.
    """
    if site not in model.hook_sites:
        raise KeyError(f"{site!r} is not a hook site of this model")
    pname = site + ".w"
    param = model.params[pname]
    shape = param.shape
    theta0 = param.data.ravel().copy()
    x = Tensor(batch_images)
    labels = np.asarray(batch_labels, dtype=np.int64)

    def grad_fn(theta: np.ndarray) -> np.ndarray:
        saved = param.data
        probe = Tensor(theta.reshape(shape), requires_grad=True)
        model.params[pname] = probe
        try:
            loss = ad.cross_entropy_loss(model.forward(x), labels)
            loss.backward()
        finally:
            model.params[pname] = param
            param.data = saved
        return probe.grad.ravel()

    return grad_fn, theta0


def layer_trace(model: Model, batch_images, batch_labels, site: str,
                num_probes: int = 32, seed: int = 0) -> TraceEstimate:
    grad_fn, theta0 = layer_grad_fn(model, batch_images, batch_labels, site)
    return avg_hessian_trace(grad_fn, theta0.size, num_probes, seed, theta=theta0)


def sensitivity_report(model: Model, batch_images, batch_labels, sites=None,
                       num_probes: int = 32, seed: int = 0) -> SensitivityReport:
    sites = list(sites) if sites is not None else list(model.hook_sites)
    report = SensitivityReport(sites)
    for i, site in enumerate(sites):
        report.estimates.append(
            layer_trace(model, batch_images, batch_labels, site, num_probes, seed + i)
        )
    return report

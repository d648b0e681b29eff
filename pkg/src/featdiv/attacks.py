"""Momentum-family iterative attacks and input transformations.

Attacks consume an arbitrary forward function (plain, diversified, or ghost),
so the same loop drives every method. All randomness is keyed per image and
per iteration, making batches independent of execution order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .seeding import attack_rng

ForwardFn = Callable[[Tensor, int], Tensor]

# DIM enlarges by up to this factor before padding back; mirrors the canonical
# 299 -> 330 setup at our resolution.
_DIM_ENLARGE = 1.1


class AttackError(RuntimeError):
    """Attack could not proceed (e.g. non-finite gradient)."""


@dataclass
class AttackConfig:
    epsilon: float = 16.0 / 255.0
    steps: int = 10
    step_size: float = 1.6 / 255.0
    decay: float = 1.0
    variant: str = "mi"
    dim_prob: float = 0.0
    tim_kernel_size: int = 0
    tim_sigma: float = 3.0

    def __post_init__(self):
        self.variant = self.variant.lower()
        if self.variant not in ("mi", "ni"):
            raise ValueError(f"variant must be 'mi' or 'ni', got {self.variant!r}")
        if self.epsilon <= 0 or self.step_size <= 0 or self.steps <= 0:
            raise ValueError("epsilon, step_size and steps must be positive")
        if self.decay < 0:
            raise ValueError("decay must be non-negative")
        if not 0.0 <= self.dim_prob <= 1.0:
            raise ValueError("dim_prob must lie in [0,1]")
        if self.tim_kernel_size and self.tim_kernel_size % 2 == 0:
            raise ValueError("tim_kernel_size must be odd (or 0 to disable)")


@dataclass
class AttackResult:
    x_adv: np.ndarray
    success: np.ndarray | None
    loss_trace: list[float]


def clip_perturbation(x_adv, x, epsilon: float):
    """Clamp x_adv into [x-epsilon, x+epsilon] intersected with [0,1]."""
    xa = x_adv.data if isinstance(x_adv, Tensor) else np.asarray(x_adv)
    xb = x.data if isinstance(x, Tensor) else np.asarray(x)
    if xa.shape != xb.shape:
        raise ad.DimensionError(f"clip_perturbation: shapes {xa.shape} and {xb.shape} differ")
    out = np.clip(np.clip(xa, xb - epsilon, xb + epsilon), 0.0, 1.0)
    return Tensor(out) if isinstance(x_adv, Tensor) else out


def gaussian_kernel(size: int, sigma: float) -> Tensor:
    if size <= 0 or size % 2 == 0:
        raise ValueError(f"kernel size must be odd and positive, got {size}")
    r = np.arange(size) - size // 2
    k = np.exp(-(r**2) / (2.0 * sigma**2))
    k = np.outer(k, k)
    return Tensor(k / k.sum())


def tim_smooth(grad: np.ndarray, kernel) -> np.ndarray:
    """Per-channel same-padding convolution of the input gradient."""
    k = kernel.data if isinstance(kernel, Tensor) else np.asarray(kernel)
    size = k.shape[0]
    if size == 1:
        return grad * float(k[0, 0])
    pad = size // 2
    gp = np.pad(grad, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(gp, (size, size), axis=(2, 3))
    return np.einsum("nchwij,ij->nchw", win, k[::-1, ::-1])


def _resize_pad_index_map(h: int, w: int, rng: np.random.Generator):
    """Composite index map for random nearest-neighbor resize + pad + resize back.

    Returns (row_idx, col_idx, valid) each shaped [h,w]; positions with
    valid == 0 read from the zero padding.
    """
    canvas_h, canvas_w = int(_DIM_ENLARGE * h), int(_DIM_ENLARGE * w)
    rnd_h = int(rng.integers(h, canvas_h)) if canvas_h > h else h
    rnd_w = rnd_h if h == w else (int(rng.integers(w, canvas_w)) if canvas_w > w else w)
    pad_top = int(rng.integers(0, canvas_h - rnd_h + 1))
    pad_left = int(rng.integers(0, canvas_w - rnd_w + 1))
    ci = (np.arange(h) * canvas_h) // h
    cj = (np.arange(w) * canvas_w) // w
    ri = ci - pad_top
    rj = cj - pad_left
    valid_i = (ri >= 0) & (ri < rnd_h)
    valid_j = (rj >= 0) & (rj < rnd_w)
    src_i = np.clip(ri, 0, rnd_h - 1) * h // rnd_h
    src_j = np.clip(rj, 0, rnd_w - 1) * w // rnd_w
    row = np.broadcast_to(src_i[:, None], (h, w))
    col = np.broadcast_to(src_j[None, :], (h, w))
    valid = valid_i[:, None] & valid_j[None, :]
    return row, col, valid


def _indexed_gather(x: Tensor, row: np.ndarray, col: np.ndarray, valid: np.ndarray) -> Tensor:
    """out[n,c,i,j] = x[n,c,row[n,i,j],col[n,i,j]] masked by valid[n,i,j].

    Piecewise-constant index routing: backward scatter-adds the gradient to
    the source pixels.
    """
    n, c, h, w = x.shape
    n_idx = np.arange(n)[:, None, None]
    data = x.data[n_idx, :, row, col].transpose(0, 3, 1, 2) * valid[:, None, :, :]

    def backward_fn(g):
        gx = np.zeros_like(x.data)
        n4 = np.arange(n)[:, None, None, None]
        c4 = np.arange(c)[None, :, None, None]
        np.add.at(gx, (n4, c4, row[:, None, :, :], col[:, None, :, :]),
                  g * valid[:, None, :, :])
        ad._accumulate(x, gx)

    return ad._result(data, (x,), backward_fn)


def dim_transform(x: Tensor, dim_prob: float, rng) -> Tensor:
    """Diverse-input transform: with probability dim_prob per image, randomly
    enlarge (nearest-neighbor), zero-pad onto a larger canvas, and resize back.

    rng is a Generator (shared draws per image in batch order) or a sequence
    of per-image Generators. Output shape always equals input shape.
    """
    if not 0.0 <= dim_prob <= 1.0:
        raise ValueError(f"dim_prob must lie in [0,1], got {dim_prob}")
    if dim_prob == 0.0:
        return x
    n, _, h, w = x.shape
    per_sample = not isinstance(rng, np.random.Generator)
    rows = np.broadcast_to((np.arange(h))[:, None], (h, w)).copy()
    cols = np.broadcast_to((np.arange(w))[None, :], (h, w)).copy()
    row_idx = np.empty((n, h, w), dtype=np.int64)
    col_idx = np.empty((n, h, w), dtype=np.int64)
    valid = np.ones((n, h, w), dtype=bool)
    any_applied = False
    for i in range(n):
        r = rng[i] if per_sample else rng
        if r.random() < dim_prob:
            row_idx[i], col_idx[i], valid[i] = _resize_pad_index_map(h, w, r)
            any_applied = True
        else:
            row_idx[i], col_idx[i] = rows, cols
    if not any_applied:
        return x
    return _indexed_gather(x, row_idx, col_idx, valid)


def _momentum_attack(forward_fn: ForwardFn, x, y_true, cfg: AttackConfig,
                     nesterov: bool, image_indices=None, master_seed: int = 0,
                     eval_logits_fn=None) -> AttackResult:
    x0 = np.ascontiguousarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if x0.min() < 0.0 or x0.max() > 1.0:
        raise ValueError("attack input must lie in [0,1]")
    y_true = np.asarray(y_true, dtype=np.int64)
    if image_indices is None:
        image_indices = np.arange(len(x0))
    kernel = gaussian_kernel(cfg.tim_kernel_size, cfg.tim_sigma) if cfg.tim_kernel_size else None
    g = np.zeros_like(x0)
    x_adv = x0.copy()
    loss_trace: list[float] = []
    for t in range(cfg.steps):
        point = x_adv + cfg.step_size * cfg.decay * g if nesterov else x_adv
        xt = Tensor(point, requires_grad=True)
        xin = xt
        if cfg.dim_prob > 0.0:
            rngs = [attack_rng(master_seed, int(gi), t) for gi in image_indices]
            xin = dim_transform(xt, cfg.dim_prob, rngs)
        loss = ad.cross_entropy_loss(forward_fn(xin, t), y_true)
        loss_trace.append(float(loss.data))
        loss.backward()
        grad = xt.grad
        if not np.all(np.isfinite(grad)):
            raise AttackError(f"non-finite gradient at iteration {t}")
        if kernel is not None:
            grad = tim_smooth(grad, kernel)
        l1 = np.abs(grad).sum(axis=tuple(range(1, grad.ndim)), keepdims=True)
        g = cfg.decay * g + grad / np.maximum(l1, 1e-12)
        x_adv = clip_perturbation(x_adv + cfg.step_size * np.sign(g), x0, cfg.epsilon)
    success = None
    if eval_logits_fn is not None:
        success = np.argmax(eval_logits_fn(x_adv), axis=1) != y_true
    return AttackResult(x_adv, success, loss_trace)


def mi_fgsm(forward_fn: ForwardFn, x, y_true, cfg: AttackConfig, **kw) -> AttackResult:
    if cfg.variant != "mi":
        raise ValueError(f"mi_fgsm requires variant 'mi', got {cfg.variant!r}")
    return _momentum_attack(forward_fn, x, y_true, cfg, nesterov=False, **kw)


def ni_fgsm(forward_fn: ForwardFn, x, y_true, cfg: AttackConfig, **kw) -> AttackResult:
    if cfg.variant != "ni":
        raise ValueError(f"ni_fgsm requires variant 'ni', got {cfg.variant!r}")
    return _momentum_attack(forward_fn, x, y_true, cfg, nesterov=True, **kw)


def run_attack(forward_fn: ForwardFn, x, y_true, cfg: AttackConfig, **kw) -> AttackResult:
    """Dispatch on cfg.variant."""
    if cfg.variant == "mi":
        return mi_fgsm(forward_fn, x, y_true, cfg, **kw)
    return ni_fgsm(forward_fn, x, y_true, cfg, **kw)

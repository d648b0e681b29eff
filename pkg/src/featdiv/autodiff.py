"""Dense float64 tensors with reverse-mode differentiation.

Small tape-based engine in the micrograd style: every operation returns a
new Tensor holding references to its parents and a closure that propagates
the output gradient back to them. Sized for desk-scale convnets, so each op
saves whatever its backward needs instead of recomputing.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

# Per-thread scratch buffers for convolution lowering. Reusing them avoids
# re-faulting ~100 MB of fresh pages on every conv call; they are only handed
# out for arrays that do not outlive the call that requested them.
_scratch = threading.local()


def _workspace(key: str, shape: tuple[int, ...]) -> np.ndarray:
    pool = getattr(_scratch, "pool", None)
    if pool is None:
        pool = _scratch.pool = {}
    buf = pool.get((key, shape))
    if buf is None:
        buf = pool[(key, shape)] = np.empty(shape)
    return buf


class DimensionError(ValueError):
    """Shapes passed to an operation do not line up."""


class BackwardError(RuntimeError):
    """backward() called on something that is not a recorded scalar."""


class Tensor:
    """n-d float64 array plus optional gradient and tape linkage."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Populate .grad on every requires_grad tensor reachable from here.

        Gradients within one call accumulate additively over multiple uses of
        a tensor; repeated calls overwrite rather than accumulate, so replays
        of the same tape give identical results.
        """
        if self.data.size != 1:
            raise BackwardError(
                f"backward() needs a scalar, got shape {self.data.shape}"
            )
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        for node in topo:
            node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)


def _result(data, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    # Grads allocate lazily; accumulation stays out-of-place because one
    # gradient array may feed several parents (e.g. through add).
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def constant(x) -> Tensor:
    return Tensor(x)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")

    def backward_fn(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _result(a.data + b.data, (a, b), backward_fn)


residual_add = add


def scale(a: Tensor, c) -> Tensor:
    """Multiply by a constant scalar or broadcastable array (no grad for c)."""
    c = np.asarray(c, dtype=np.float64)
    data = a.data * c
    if data.shape != a.shape:
        raise DimensionError(f"scale: constant {c.shape} broadcasts {a.shape} to {data.shape}")

    def backward_fn(g):
        _accumulate(a, g * c)

    return _result(data, (a,), backward_fn)


def shift(a: Tensor, c) -> Tensor:
    """Add a constant scalar or broadcastable array (no grad for c)."""
    c = np.asarray(c, dtype=np.float64)
    data = a.data + c
    if data.shape != a.shape:
        raise DimensionError(f"shift: constant {c.shape} broadcasts {a.shape} to {data.shape}")

    def backward_fn(g):
        _accumulate(a, g)

    return _result(data, (a,), backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")

    def backward_fn(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _result(a.data * b.data, (a, b), backward_fn)


def tensor_sum(a: Tensor) -> Tensor:
    def backward_fn(g):
        _accumulate(a, np.full_like(a.data, float(g)))

    return _result(a.data.sum(), (a,), backward_fn)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward_fn(g):
        _accumulate(a, g * mask)

    return _result(np.maximum(a.data, 0.0), (a,), backward_fn)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of NCHW input with FCkhkw kernel.

    Lowered to one batched GEMM over gathered kernel-window slices; the
    gathered column tensor is saved for the backward pass.
    """
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise DimensionError(
            f"conv2d: need 4-d input and kernel, got {x.shape} and {kernel.shape}"
        )
    n, c, h, w = x.shape
    f, ck, kh, kw = kernel.shape
    if ck != c:
        raise DimensionError(f"conv2d: input channels {c} != kernel channels {ck}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError(
            f"conv2d: kernel {kh}x{kw} exceeds padded input {h + 2 * padding}x{w + 2 * padding}"
        )
    hp, wp = h + 2 * padding, w + 2 * padding
    if padding:
        xp = _workspace(f"conv.xp{padding}", (n, c, hp, wp))
        xp[:, :, :padding].fill(0.0)
        xp[:, :, -padding:].fill(0.0)
        xp[:, :, :, :padding].fill(0.0)
        xp[:, :, :, -padding:].fill(0.0)
        xp[:, :, padding : padding + h, padding : padding + w] = x.data
    else:
        xp = x.data
    h_out = (hp - kh) // stride + 1
    w_out = (wp - kw) // stride + 1
    # col[n, (c,i,j), (h,w)] = padded input at window offset (i,j). When the
    # kernel is frozen the backward pass never reads col, so a per-thread
    # scratch buffer can hold it; a trainable kernel needs it retained.
    if kernel.requires_grad:
        col = np.empty((n, c, kh, kw, h_out, w_out))
    else:
        col = _workspace("conv.col", (n, c, kh, kw, h_out, w_out))
    for i in range(kh):
        for j in range(kw):
            col[:, :, i, j] = xp[:, :, i : i + stride * h_out : stride,
                                 j : j + stride * w_out : stride]
    col = col.reshape(n, c * kh * kw, h_out * w_out)
    wmat = kernel.data.reshape(f, c * kh * kw)
    out = np.matmul(wmat, col).reshape(n, f, h_out, w_out)
    if not kernel.requires_grad:
        col = None

    def backward_fn(g):
        g3 = g.reshape(n, f, h_out * w_out)
        if kernel.requires_grad:
            gw = np.tensordot(g3, col, axes=([0, 2], [0, 2]))
            _accumulate(kernel, gw.reshape(f, c, kh, kw))
        if x.requires_grad:
            gcol3 = _workspace("conv.gcol", (n, c * kh * kw, h_out * w_out))
            np.matmul(wmat.T, g3, out=gcol3)
            gcol = gcol3.reshape(n, c, kh, kw, h_out, w_out)
            gxp = np.zeros((n, c, hp, wp))
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * h_out : stride,
                        j : j + stride * w_out : stride] += gcol[:, :, i, j]
            if padding:
                _accumulate(x, gxp[:, :, padding:-padding, padding:-padding])
            else:
                _accumulate(x, gxp)

    return _result(out, (x, kernel), backward_fn)


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x @ weight + bias for x:[N,D], weight:[D,K], bias:[K]."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or bias.data.ndim != 1:
        raise DimensionError(
            f"affine: ranks must be 2/2/1, got {x.shape}/{weight.shape}/{bias.shape}"
        )
    if x.shape[1] != weight.shape[0] or weight.shape[1] != bias.shape[0]:
        raise DimensionError(
            f"affine: inner dims disagree, x {x.shape} weight {weight.shape} bias {bias.shape}"
        )

    def backward_fn(g):
        _accumulate(x, g @ weight.data.T)
        if weight.requires_grad:
            _accumulate(weight, x.data.T @ g)
        if bias.requires_grad:
            _accumulate(bias, g.sum(axis=0))

    return _result(x.data @ weight.data + bias.data, (x, weight, bias), backward_fn)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise DimensionError(f"global_avg_pool: need NCHW, got {x.shape}")
    n, c, h, w = x.shape

    def backward_fn(g):
        _accumulate(x, np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy())

    return _result(x.data.mean(axis=(2, 3)), (x,), backward_fn)


def channel_scale_shift(x: Tensor, sc: Tensor, sh: Tensor) -> Tensor:
    """Per-channel y = x * sc[c] + sh[c] on NCHW input; all three differentiable."""
    if x.data.ndim != 4:
        raise DimensionError(f"channel_scale_shift: need NCHW, got {x.shape}")
    c = x.shape[1]
    if sc.shape != (c,) or sh.shape != (c,):
        raise DimensionError(
            f"channel_scale_shift: scale/shift must be [{c}], got {sc.shape}/{sh.shape}"
        )
    scb = sc.data[None, :, None, None]

    def backward_fn(g):
        _accumulate(x, g * scb)
        if sc.requires_grad:
            _accumulate(sc, (g * x.data).sum(axis=(0, 2, 3)))
        if sh.requires_grad:
            _accumulate(sh, g.sum(axis=(0, 2, 3)))

    out = x.data * scb
    out += sh.data[None, :, None, None]
    return _result(out, (x, sc, sh), backward_fn)


def batch_stats_normalize(
    x: Tensor, gamma: Tensor, beta: Tensor, mean: np.ndarray, var: np.ndarray,
    eps: float = 1e-5,
) -> Tensor:
    """Normalize with fixed per-channel statistics, then scale/shift.

    mean/var are constants of the graph (inference-mode running statistics,
    or detached batch statistics during training).
    """
    inv_std = 1.0 / np.sqrt(np.asarray(var, dtype=np.float64) + eps)
    eff_scale = scale(gamma, inv_std)
    eff_shift = shift(scale(gamma, -np.asarray(mean, dtype=np.float64) * inv_std), 0.0)
    eff_shift = add(eff_shift, beta)
    return channel_scale_shift(x, eff_scale, eff_shift)


def batch_norm_train(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization with statistics inside the graph.

    Unlike batch_stats_normalize, the mean/variance here are functions of x,
    so the backward pass carries the full normalization Jacobian (the terms
    that keep activations self-stabilizing during training).
    """
    if x.data.ndim != 4:
        raise DimensionError(f"batch_norm_train: need NCHW, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(
            f"batch_norm_train: gamma/beta must be [{c}], got {gamma.shape}/{beta.shape}"
        )
    axes = (0, 2, 3)
    m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
    mean = x.data.mean(axis=axes)
    var = x.data.var(axis=axes)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def backward_fn(g):
        if beta.requires_grad:
            _accumulate(beta, g.sum(axis=axes))
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).sum(axis=axes))
        if x.requires_grad:
            dxhat = g * gamma.data[None, :, None, None]
            s1 = dxhat.sum(axis=axes)[None, :, None, None]
            s2 = (dxhat * xhat).sum(axis=axes)[None, :, None, None]
            dx = (inv_std[None, :, None, None] / m) * (m * dxhat - s1 - xhat * s2)
            _accumulate(x, dx)

    return _result(out, (x, gamma, beta), backward_fn)


def cross_entropy_loss(logits: Tensor, labels) -> Tensor:
    """Mean of -log softmax(logits)[label], max-subtracted for stability."""
    if logits.data.ndim != 2:
        raise DimensionError(f"cross_entropy_loss: need [N,K] logits, got {logits.shape}")
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"cross_entropy_loss: need {n} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"cross_entropy_loss: label out of range [0,{k})")
    labels = labels.astype(np.int64)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -log_probs[np.arange(n), labels].mean()
    softmax = np.exp(log_probs)

    def backward_fn(g):
        gl = softmax.copy()
        gl[np.arange(n), labels] -= 1.0
        _accumulate(logits, gl * (float(g) / n))

    return _result(loss, (logits,), backward_fn)

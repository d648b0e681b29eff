"""Small classifiers: declarative arch specs, training, and serialization.

Two reference architectures ship with the toolkit: "smallresnet" (3 stages x
2 residual blocks, widths 16/32/64) and "plaincnn", a non-residual stack used
as an architecturally distinct transfer target.

Hook sites are the residual-block convolution outputs, in forward order.
For architectures without residual blocks, every standalone convolution
output is hookable instead.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Dataset
from .seeding import derive_rng

_SALT_INIT = 0x494E49
_SALT_TRAIN = 0x545249

_BN_EPS = 1e-5
_BN_MOMENTUM = 0.1

SiteTransform = Callable[[Tensor, str], Tensor]


class ArchSpecError(ValueError):
    """Malformed architecture specification."""


class ModelFormatError(ValueError):
    """Corrupt or truncated model file."""


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss)."""


SMALLRESNET_SPEC = """\
input 3 32 32
classes 10
conv stem 16 3 1 1
norm stem
relu
block s1b1 16 1
block s1b2 16 1
block s2b1 32 2
block s2b2 32 1
block s3b1 64 2
block s3b2 64 1
pool
fc head
"""

PLAINCNN_SPEC = """\
input 3 32 32
classes 10
conv c1 24 3 1 1
norm c1
relu
conv c2 24 3 2 1
norm c2
relu
conv c3 48 3 1 1
norm c3
relu
conv c4 48 3 2 1
norm c4
relu
conv c5 96 3 1 1
norm c5
relu
conv c6 96 3 2 1
norm c6
relu
pool
fc head
"""

REFERENCE_ARCHS = {"smallresnet": SMALLRESNET_SPEC, "plaincnn": PLAINCNN_SPEC}


def _parse_arch_spec(text: str):
    """Parse the declarative layer list into (input_shape, classes, layers)."""
    input_shape = None
    num_classes = None
    layers = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        kind, args = tok[0], tok[1:]
        try:
            if kind == "input":
                input_shape = (int(args[0]), int(args[1]), int(args[2]))
            elif kind == "classes":
                num_classes = int(args[0])
            elif kind == "conv":
                layers.append(("conv", args[0], int(args[1]), int(args[2]), int(args[3]), int(args[4])))
            elif kind == "norm":
                layers.append(("norm", args[0]))
            elif kind == "relu":
                layers.append(("relu",))
            elif kind == "block":
                layers.append(("block", args[0], int(args[1]), int(args[2])))
            elif kind == "pool":
                layers.append(("pool",))
            elif kind == "fc":
                layers.append(("fc", args[0]))
            else:
                raise ArchSpecError(f"line {lineno}: unknown layer kind {kind!r}")
        except (IndexError, ValueError) as e:
            if isinstance(e, ArchSpecError):
                raise
            raise ArchSpecError(f"line {lineno}: bad arguments for {kind!r}: {line!r}") from e
    if input_shape is None or num_classes is None:
        raise ArchSpecError("spec must declare 'input C H W' and 'classes K'")
    if not layers:
        raise ArchSpecError("spec declares no layers")
    return input_shape, num_classes, layers


class Model:
    """Frozen-after-training classifier with named, hookable activation sites."""

    def __init__(self, arch_spec: str, seed: int = 0):
        self.arch_spec = arch_spec
        self.input_shape, self.num_classes, self.layers = _parse_arch_spec(arch_spec)
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.hook_sites: list[str] = []
        self._build(seed)

    # -- construction -----------------------------------------------------

    def _he_conv(self, rng, name, out_ch, in_ch, k):
        fan_in = in_ch * k * k
        self.params[name + ".w"] = Tensor(
            rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_ch, in_ch, k, k))
        )

    def _norm_params(self, name, ch):
        self.params[name + ".gamma"] = Tensor(np.ones(ch))
        self.params[name + ".beta"] = Tensor(np.zeros(ch))
        self.buffers[name + ".running_mean"] = np.zeros(ch)
        self.buffers[name + ".running_var"] = np.ones(ch)

    def _build(self, seed: int):
        rng = derive_rng(seed, _SALT_INIT)
        ch = self.input_shape[0]
        block_sites: list[str] = []
        conv_sites: list[str] = []
        self._norm_channels: dict[str, int] = {}
        for layer in self.layers:
            kind = layer[0]
            if kind == "conv":
                _, name, out_ch, k, _, _ = layer
                self._he_conv(rng, name, out_ch, ch, k)
                conv_sites.append(name)
                ch = out_ch
            elif kind == "norm":
                name = layer[1]
                self._norm_params(name, ch)
                self._norm_channels[name] = ch
            elif kind == "block":
                _, name, out_ch, stride = layer
                self._he_conv(rng, name + ".conv1", out_ch, ch, 3)
                self._norm_params(name + ".norm1", out_ch)
                self._he_conv(rng, name + ".conv2", out_ch, out_ch, 3)
                self._norm_params(name + ".norm2", out_ch)
                if stride != 1 or out_ch != ch:
                    self._he_conv(rng, name + ".proj", out_ch, ch, 1)
                    self._norm_params(name + ".projnorm", out_ch)
                block_sites += [name + ".conv1", name + ".conv2"]
                ch = out_ch
            elif kind == "fc":
                name = layer[1]
                self.params[name + ".w"] = Tensor(
                    rng.normal(0.0, np.sqrt(2.0 / ch), size=(ch, self.num_classes))
                )
                self.params[name + ".b"] = Tensor(np.zeros(self.num_classes))
        self.hook_sites = block_sites if block_sites else conv_sites

    # -- forward ----------------------------------------------------------

    def _norm(self, name, x, train_mode, calibrate):
        gamma = self.params[name + ".gamma"]
        beta = self.params[name + ".beta"]
        if calibrate:
            self.buffers[name + ".running_mean"] = x.data.mean(axis=(0, 2, 3))
            self.buffers[name + ".running_var"] = x.data.var(axis=(0, 2, 3))
        if train_mode:
            return ad.batch_norm_train(x, gamma, beta, _BN_EPS)
        mean = self.buffers[name + ".running_mean"]
        var = self.buffers[name + ".running_var"]
        return ad.batch_stats_normalize(x, gamma, beta, mean, var, _BN_EPS)

    def _site(self, name, h, site_transforms, collected):
        if collected is not None and name in collected:
            collected[name] = h.data.copy()
        if site_transforms is not None and name in site_transforms:
            h = site_transforms[name](h, name)
        return h

    def forward(
        self,
        x: Tensor,
        site_transforms: dict[str, SiteTransform] | None = None,
        collected: dict[str, np.ndarray] | None = None,
        train_mode: bool = False,
        calibrate: bool = False,
    ) -> Tensor:
        """Run the network; optionally transform and/or record hook-site features.

        site_transforms maps hook-site name -> fn(features, site_name) -> features.
        collected, when given, must be pre-keyed with the site names to record;
        it receives detached copies of the (pre-transform) activations.
        train_mode normalizes with current-batch statistics; calibrate does the
        same and additionally freezes those statistics into the buffers that
        every later inference-mode forward uses.
        """
        if x.data.ndim != 4 or x.shape[1:] != self.input_shape:
            raise ad.DimensionError(
                f"forward: expected [N,{','.join(map(str, self.input_shape))}], got {x.shape}"
            )
        h = x
        for layer in self.layers:
            kind = layer[0]
            if kind == "conv":
                _, name, _, _, stride, pad = layer
                h = ad.conv2d(h, self.params[name + ".w"], stride, pad)
                h = self._site(name, h, site_transforms, collected)
            elif kind == "norm":
                h = self._norm(layer[1], h, train_mode, calibrate)
            elif kind == "relu":
                h = ad.relu(h)
            elif kind == "block":
                _, name, out_ch, stride = layer
                identity = h
                t = ad.conv2d(h, self.params[name + ".conv1.w"], stride, 1)
                t = self._site(name + ".conv1", t, site_transforms, collected)
                t = ad.relu(self._norm(name + ".norm1", t, train_mode, calibrate))
                t = ad.conv2d(t, self.params[name + ".conv2.w"], 1, 1)
                t = self._site(name + ".conv2", t, site_transforms, collected)
                t = self._norm(name + ".norm2", t, train_mode, calibrate)
                if name + ".proj.w" in self.params:
                    identity = ad.conv2d(identity, self.params[name + ".proj.w"], stride, 0)
                    identity = self._norm(name + ".projnorm", identity, train_mode, calibrate)
                h = ad.relu(ad.residual_add(t, identity))
            elif kind == "pool":
                h = ad.global_avg_pool(h)
            elif kind == "fc":
                name = layer[1]
                h = ad.affine(h, self.params[name + ".w"], self.params[name + ".b"])
        return h

    # -- parameter plumbing -------------------------------------------------

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag

    def parameter_vector(self) -> np.ndarray:
        return np.concatenate([self.params[k].data.ravel() for k in sorted(self.params)])


def build_model(arch_spec: str, seed: int = 0) -> Model:
    return Model(arch_spec, seed)


# -- inference helpers ------------------------------------------------------


def logits_batched(model: Model, images: np.ndarray, batch_size: int = 256,
                   site_transforms=None) -> np.ndarray:
    outs = []
    for i in range(0, len(images), batch_size):
        outs.append(model.forward(Tensor(images[i : i + batch_size]),
                                  site_transforms=site_transforms).data)
    return np.concatenate(outs) if outs else np.empty((0, model.num_classes))


def predict(model: Model, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Argmax class per image; ties break toward the lower class index."""
    return np.argmax(logits_batched(model, images, batch_size), axis=1)


def accuracy(model: Model, dataset: Dataset, batch_size: int = 256) -> float:
    if len(dataset) == 0:
        return 0.0
    return float(np.mean(predict(model, dataset.images, batch_size) == dataset.labels))


# -- training ----------------------------------------------------------------


@dataclass
class TrainResult:
    model: Model
    train_accuracy: float
    test_accuracy: float
    final_loss: float


def train(
    model: Model,
    train_set: Dataset,
    test_set: Dataset | None = None,
    epochs: int = 15,
    lr: float = 0.05,
    momentum: float = 0.9,
    batch_size: int = 64,
    seed: int = 0,
) -> TrainResult:
    """Momentum SGD on cross-entropy. Deterministic given the seed."""
    if len(train_set) == 0:
        raise ValueError("train: empty dataset")
    model.set_requires_grad(True)
    velocity = {k: np.zeros_like(p.data) for k, p in model.params.items()}
    last_loss = float("nan")
    for epoch in range(epochs):
        order = derive_rng(seed, _SALT_TRAIN, epoch).permutation(len(train_set))
        for start in range(0, len(train_set), batch_size):
            idx = order[start : start + batch_size]
            x = Tensor(train_set.images[idx])
            logits = model.forward(x, train_mode=True)
            loss = ad.cross_entropy_loss(logits, train_set.labels[idx])
            last_loss = float(loss.data)
            if not np.isfinite(last_loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            loss.backward()
            for k, p in model.params.items():
                velocity[k] = momentum * velocity[k] + p.grad
                p.data -= lr * velocity[k]
                p.grad = None
    model.set_requires_grad(False)
    if epochs > 0:
        # Freeze normalization statistics of the trained network so every
        # later forward pass is the same deterministic function.
        calib = train_set.images[: min(len(train_set), 512)]
        model.forward(Tensor(calib), calibrate=True)
    train_acc = accuracy(model, train_set)
    test_acc = accuracy(model, test_set) if test_set is not None else float("nan")
    return TrainResult(model, train_acc, test_acc, last_loss)


# -- serialization ------------------------------------------------------------

_MAGIC = b"FDV1"


def save_model(model: Model, path: str) -> None:
    """Binary format: magic, length-prefixed arch spec, named float64 records
    (parameters then normalization statistics), trailing CRC32."""
    out = bytearray(_MAGIC)
    spec = model.arch_spec.encode("utf-8")
    out += struct.pack("<I", len(spec)) + spec
    records = [(k, model.params[k].data) for k in sorted(model.params)]
    records += [(k, model.buffers[k]) for k in sorted(model.buffers)]
    out += struct.pack("<I", len(records))
    for name, arr in records:
        nb = name.encode("utf-8")
        out += struct.pack("<H", len(nb)) + nb
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.astype("<f8").tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    with open(path, "wb") as fh:
        fh.write(bytes(out))


def load_model(path: str) -> Model:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12 or raw[:4] != _MAGIC:
        raise ModelFormatError(f"{path}: not a model file (bad magic)")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise ModelFormatError(f"{path}: checksum mismatch (corrupt or truncated)")
    off = 4

    def take(n):
        nonlocal off
        if off + n > len(body):
            raise ModelFormatError(f"{path}: truncated record at byte {off}")
        chunk = body[off : off + n]
        off += n
        return chunk

    (spec_len,) = struct.unpack("<I", take(4))
    spec = take(spec_len).decode("utf-8")
    model = Model(spec)
    (count,) = struct.unpack("<I", take(4))
    loaded = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        n_vals = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(take(8 * n_vals), dtype="<f8").reshape(shape).copy()
        loaded[name] = arr
    if off != len(body):
        raise ModelFormatError(f"{path}: {len(body) - off} trailing bytes")
    for name, arr in loaded.items():
        if name in model.params:
            if model.params[name].shape != arr.shape:
                raise ModelFormatError(
                    f"{path}: {name} has shape {arr.shape}, spec declares {model.params[name].shape}"
                )
            model.params[name] = Tensor(arr)
        elif name in model.buffers:
            model.buffers[name] = arr
        else:
            raise ModelFormatError(f"{path}: record {name!r} not declared by arch spec")
    missing = (set(model.params) | set(model.buffers)) - set(loaded)
    if missing:
        raise ModelFormatError(f"{path}: missing records {sorted(missing)}")
    return model

"""Convolutional building blocks, losses, Adam and checkpoint files.

Layers are declared with :class:`LayerSpec` (U/K/S/P notation for
convolutions) and grouped into blocks. A :class:`Network` is an encoder made
of blocks whose outputs are the probe points, followed by optional
classifier and decoder heads. Everything is plain ``torch.nn`` so every layer
supports double backpropagation.

Checkpoint layout (all integers little-endian)::

    magic      8 bytes   b"EMBATTR\\x00"
    version    uint32    currently 1
    meta_len   uint32    length of the JSON metadata blob
    meta       bytes     UTF-8 JSON (recipe and anything else the caller stores)
    count      uint32    number of tensors
    per tensor, in state_dict order:
        name_len  uint16, name  UTF-8 bytes
        ndim      uint8,  dims  ndim x uint32
        data      prod(dims) x float64
"""

from __future__ import annotations

import contextlib
import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .tensor_core import DTYPE, ShapeError, Tensor

LAYER_KINDS = (
    "conv2d", "conv2d_transposed", "linear", "batchnorm", "maxpool",
    "upsample_nn", "relu", "softplus", "sigmoid", "flatten", "crop",
)


@dataclass(frozen=True)
class LayerSpec:
    """One layer. ``units``/``kernel``/``stride``/``padding`` follow U/K/S/P."""

    kind: str
    units: int = 1
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    ceil_mode: bool = False
    scale: int = 2
    size: tuple[int, int] | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kernel < 1 or self.stride < 1 or self.units < 1:
            raise ValueError(f"{self.kind}: K, S and U must be >= 1")
        if self.padding < 0:
            raise ValueError(f"{self.kind}: padding must be >= 0")


def conv(spec: str) -> LayerSpec:
    """Parse ``"U/K/S/P"`` into a conv2d spec."""
    u, k, s, p = (int(v) for v in spec.split("/"))
    return LayerSpec("conv2d", units=u, kernel=k, stride=s, padding=p)


class CenterCrop(nn.Module):
    def __init__(self, size: tuple[int, int]):
        super().__init__()
        self.size = tuple(size)

    def forward(self, x):
        h, w = self.size
        top = (x.shape[-2] - h) // 2
        left = (x.shape[-1] - w) // 2
        return x[..., top:top + h, left:left + w]


def make_layer(spec: LayerSpec, in_shape: tuple[int, ...]) -> tuple[nn.Module, tuple[int, ...]]:
    """Instantiate ``spec`` for inputs of per-sample shape ``in_shape``.

    Returns the module and its per-sample output shape.
    """
    k = spec.kind
    if k in ("conv2d", "conv2d_transposed"):
        if len(in_shape) != 3:
            raise ShapeError(f"{k} expects (C, H, W) input, got {list(in_shape)}")
        c, h, w = in_shape
        if k == "conv2d":
            mod = nn.Conv2d(c, spec.units, spec.kernel, spec.stride, spec.padding, dtype=DTYPE)
            ho = (h + 2 * spec.padding - spec.kernel) // spec.stride + 1
            wo = (w + 2 * spec.padding - spec.kernel) // spec.stride + 1
        else:
            mod = nn.ConvTranspose2d(c, spec.units, spec.kernel, spec.stride, spec.padding,
                                     dtype=DTYPE)
            ho = (h - 1) * spec.stride - 2 * spec.padding + spec.kernel
            wo = (w - 1) * spec.stride - 2 * spec.padding + spec.kernel
        if ho < 1 or wo < 1:
            raise ShapeError(f"{k}: input {list(in_shape)} too small for K={spec.kernel}")
        return mod, (spec.units, ho, wo)
    if k == "linear":
        if len(in_shape) != 1:
            raise ShapeError(f"linear expects flat input, got {list(in_shape)}")
        return nn.Linear(in_shape[0], spec.units, dtype=DTYPE), (spec.units,)
    if k == "batchnorm":
        if len(in_shape) == 3:
            return nn.BatchNorm2d(in_shape[0], momentum=0.1, dtype=DTYPE), in_shape
        return nn.BatchNorm1d(in_shape[0], momentum=0.1, dtype=DTYPE), in_shape
    if k == "maxpool":
        c, h, w = in_shape
        rnd = math.ceil if spec.ceil_mode else math.floor
        ho = rnd((h - spec.kernel) / spec.kernel) + 1
        wo = rnd((w - spec.kernel) / spec.kernel) + 1
        return nn.MaxPool2d(spec.kernel, ceil_mode=spec.ceil_mode), (c, ho, wo)
    if k == "upsample_nn":
        c, h, w = in_shape
        return nn.Upsample(scale_factor=spec.scale, mode="nearest"), (c, h * spec.scale, w * spec.scale)
    if k == "crop":
        c, h, w = in_shape
        th, tw = spec.size
        if th > h or tw > w:
            raise ShapeError(f"crop: target {[th, tw]} larger than input {[h, w]}")
        return CenterCrop((th, tw)), (c, th, tw)
    if k == "flatten":
        return nn.Flatten(), (math.prod(in_shape),)
    return {"relu": nn.ReLU(), "softplus": nn.Softplus(), "sigmoid": nn.Sigmoid()}[k], in_shape


def make_stack(specs: Sequence[LayerSpec], in_shape: tuple[int, ...]) -> tuple[nn.Sequential, tuple[int, ...]]:
    mods = []
    shape = tuple(in_shape)
    for s in specs:
        m, shape = make_layer(s, shape)
        mods.append(m)
    return nn.Sequential(*mods), shape


def init_parameters(module: nn.Module, generator: torch.Generator) -> None:
    """Seeded Kaiming-uniform fan-in init (torch's default scheme, a=sqrt(5)).

    Weight bound is ``1/sqrt(fan_in)`` (gain sqrt(1/3) * sqrt(3/fan_in)),
    biases uniform in the same range. Batch norm is reset to the identity.
    """
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            w = m.weight
            if isinstance(m, nn.ConvTranspose2d):
                fan_in = w.shape[0] * w[0, 0].numel()
            else:
                fan_in = w[0].numel()
            bound = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                w.copy_(torch.rand(w.shape, generator=generator, dtype=w.dtype) * 2 * bound - bound)
                if m.bias is not None:
                    m.bias.copy_(torch.rand(m.bias.shape, generator=generator,
                                            dtype=m.bias.dtype) * 2 * bound - bound)
        elif isinstance(m, nn.modules.batchnorm._BatchNorm):
            m.reset_parameters()


class Network(nn.Module):
    """Encoder blocks with probe points plus optional heads.

    Probe ``0`` is the network input, probe ``k`` (1-based) the output of
    encoder block ``k``. The embedding is the flattened output of the last
    block.
    """

    def __init__(self, blocks: Sequence[Sequence[LayerSpec]], input_shape=(1, 28, 28),
                 classifier: Sequence[LayerSpec] | None = None,
                 decoder: Sequence[LayerSpec] | None = None, name: str = "network"):
        super().__init__()
        self.name = name
        self.input_shape = tuple(input_shape)
        self.block_specs = [list(b) for b in blocks]
        shapes = [self.input_shape]
        mods = []
        for i, b in enumerate(blocks):
            try:
                m, shp = make_stack(b, shapes[-1])
            except ShapeError as e:
                raise ShapeError(f"encoder block {i + 1}: {e}") from None
            mods.append(m)
            shapes.append(shp)
        self.blocks = nn.ModuleList(mods)
        self.probe_shapes = shapes
        self.embedding_dim = math.prod(shapes[-1])
        self.classifier = None
        self.decoder = None
        if classifier:
            self.classifier, _ = make_stack(classifier, (self.embedding_dim,))
        if decoder:
            dec_in = (self.embedding_dim,) if decoder[0].kind == "linear" else shapes[-1]
            self.decoder, out = make_stack(decoder, dec_in)
            self.decoder_output_shape = out
        self.to(DTYPE)

    @property
    def probes(self) -> list[int]:
        return list(range(len(self.blocks) + 1))

    def probe_shape(self, p: int) -> tuple[int, ...]:
        self._check_probe(p)
        return self.probe_shapes[p]

    def _check_probe(self, p: int) -> None:
        if not 0 <= p <= len(self.blocks):
            raise KeyError(f"probe {p} not found; valid probes are 0..{len(self.blocks)}")

    def _check_input(self, x: Tensor) -> None:
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(
                f"{self.name}: input shape {list(x.shape[1:])} does not match "
                f"expected {list(self.input_shape)}"
            )

    def activation(self, x: Tensor, p: int) -> Tensor:
        """phi_p(x): run the first ``p`` blocks."""
        self._check_input(x)
        self._check_probe(p)
        h = x
        for b in self.blocks[:p]:
            h = b(h)
        return h

    def embed_from(self, h: Tensor, p: int) -> Tensor:
        """xi_p: map a probe-``p`` activation to the (flat) embedding."""
        self._check_probe(p)
        for b in self.blocks[p:]:
            h = b(h)
        return h.flatten(1)

    def embed(self, x: Tensor) -> Tensor:
        return self.embed_from(self.activation(x, 0), 0)

    def forward(self, x: Tensor, capture: Iterable[int] = ()):
        """Run the network; returns ``(outputs, captured)``.

        ``outputs`` has key ``embedding`` plus ``logits``/``reconstruction``
        for the heads present. ``captured`` maps each requested probe to its
        activation (a live graph node).
        """
        self._check_input(x)
        capture = set(capture)
        for p in capture:
            self._check_probe(p)
        captured = {}
        h = x
        if 0 in capture:
            captured[0] = h
        for i, b in enumerate(self.blocks, start=1):
            h = b(h)
            if i in capture:
                captured[i] = h
        z = h.flatten(1)
        out = {"embedding": z}
        if self.classifier is not None:
            out["logits"] = self.classifier(z)
        if self.decoder is not None:
            d = self.decoder(z if isinstance(self.decoder[0], nn.Linear) else h)
            out["reconstruction"] = d.reshape(x.shape)
        return out, captured

    def encoder_layers(self) -> list[tuple[str, nn.Module]]:
        """Parameterised encoder layers, named ``block<k>.<idx>``."""
        out = []
        for i, b in enumerate(self.blocks, start=1):
            for j, m in enumerate(b):
                if any(True for _ in m.parameters(recurse=False)):
                    out.append((f"block{i}.{j}", m))
        return out


@contextlib.contextmanager
def eval_mode(net: nn.Module):
    """Temporarily switch ``net`` to evaluation mode."""
    was = net.training
    net.eval()
    try:
        yield net
    finally:
        net.train(was)


@contextlib.contextmanager
def frozen_bn_stats(net: nn.Module):
    """Batch-statistics normalisation without touching the running averages."""
    bns = [m for m in net.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]
    saved = [m.momentum for m in bns]
    counts = [m.num_batches_tracked.clone() for m in bns]
    for m in bns:
        m.momentum = 0.0
    try:
        yield net
    finally:
        for m, mom, c in zip(bns, saved, counts):
            m.momentum = mom
            m.num_batches_tracked.copy_(c)


def loss_mse(x_hat: Tensor, x: Tensor) -> Tensor:
    """Mean squared error, averaged over every element."""
    if x_hat.shape != x.shape:
        raise ShapeError(f"mse: shape mismatch {list(x_hat.shape)} vs {list(x.shape)}")
    return ((x_hat - x) ** 2).mean()


def loss_cross_entropy(logits: Tensor, label) -> Tensor:
    """Mean softmax cross entropy. ``label`` is an int or a 1-D int tensor."""
    if logits.dim() == 1:
        logits = logits.unsqueeze(0)
    label = torch.as_tensor(label, dtype=torch.long).reshape(-1)
    n_cls = logits.shape[-1]
    if label.numel() != logits.shape[0]:
        raise ShapeError(f"cross_entropy: {label.numel()} labels for {logits.shape[0]} rows")
    if (label < 0).any() or (label >= n_cls).any():
        raise ValueError(f"cross_entropy: label out of range [0, {n_cls})")
    return F.cross_entropy(logits, label)


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence[Tensor], grads: Sequence[Tensor], state: AdamState,
              lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8) -> AdamState:
    """One in-place Adam update of ``params``; returns the updated state."""
    if len(params) != len(grads):
        raise ValueError(f"adam: {len(params)} params but {len(grads)} grads")
    b1, b2 = betas
    if not state.m:
        state.m = [torch.zeros_like(p) for p in params]
        state.v = [torch.zeros_like(p) for p in params]
    state.step += 1
    bc1 = 1 - b1 ** state.step
    bc2 = 1 - b2 ** state.step
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            if p.shape != g.shape:
                raise ShapeError(f"adam: param {list(p.shape)} vs grad {list(g.shape)}")
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            denom = (v / bc2).sqrt_().add_(eps)
            p.addcdiv_(m, denom, value=-lr / bc1)
    return state


class Adam:
    """Adam over a fixed parameter list (``adam_step`` wrapped in an object)."""

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3):
        self.params = [p for p in params if p.requires_grad]
        self.lr = lr
        self.state = AdamState()

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        grads = [p.grad if p.grad is not None else torch.zeros_like(p) for p in self.params]
        adam_step(self.params, grads, self.state, self.lr)


# -- checkpoints --------------------------------------------------------------

CKPT_MAGIC = b"EMBATTR\x00"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps_checkpoint(tensors: dict[str, Tensor], meta: dict | None = None) -> bytes:
    buf = io.BytesIO()
    blob = json.dumps(meta or {}, sort_keys=True).encode()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<II", CKPT_VERSION, len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(tensors)))
    for name, t in tensors.items():
        nb = name.encode()
        arr = t.detach().to("cpu", torch.float64).contiguous()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.dim()))
        buf.write(struct.pack(f"<{arr.dim()}I", *arr.shape))
        buf.write(arr.numpy().astype("<f8").tobytes())
    return buf.getvalue()


def loads_checkpoint(data: bytes) -> tuple[dict[str, Tensor], dict]:
    import numpy as np

    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("checkpoint truncated")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(8)) != CKPT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    version, meta_len = struct.unpack("<II", take(8))
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    meta = json.loads(bytes(take(meta_len)).decode())
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (nl,) = struct.unpack("<H", take(2))
        name = bytes(take(nl)).decode()
        (nd,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{nd}I", take(4 * nd)) if nd else ()
        n = math.prod(dims)
        arr = np.frombuffer(take(8 * n), dtype="<f8").reshape(dims)
        tensors[name] = torch.from_numpy(arr.copy())
    if pos != len(view):
        raise CheckpointError("trailing bytes after checkpoint")
    return tensors, meta


def save_checkpoint(net: nn.Module, path, meta: dict | None = None) -> None:
    Path(path).write_bytes(dumps_checkpoint(net.state_dict(), meta))


def load_state(net: nn.Module, tensors: dict[str, Tensor]) -> None:
    own = net.state_dict()
    missing = set(own) - set(tensors)
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors: {sorted(missing)}")
    with torch.no_grad():
        for k, t in own.items():
            src = tensors[k]
            if tuple(src.shape) != tuple(t.shape):
                raise CheckpointError(f"{k}: shape {list(src.shape)} != {list(t.shape)}")
            t.copy_(src.to(t.dtype))


def spec_dict(spec: LayerSpec) -> dict:
    return asdict(spec)

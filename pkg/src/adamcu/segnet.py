"""Toy fully-convolutional segmentation network.

Trunk of 3x3 conv+ReLU blocks at full resolution, a main 1x1 head on the
last block, an auxiliary 1x1 head on the penultimate block and a 1x1
projection head producing L2-normalized pixel embeddings.
"""
from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T

CHECKPOINT_MAGIC = b"ADAMCUCK"
# inputs are rendered around mid-grey; the trunk sees them centred
INPUT_OFFSET = 0.5
_CONFIG_FIELDS = ("in_channels", "hidden", "depth", "num_classes", "embed_dim")


@dataclass
class SegNetConfig:
    num_classes: int = 4
    in_channels: int = 3
    hidden: int = 32
    depth: int = 4
    embed_dim: int = 16

    def validate(self):
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.embed_dim < 2:
            raise ValueError(f"embed_dim must be >= 2, got {self.embed_dim}")
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        if self.in_channels < 1 or self.hidden < 1:
            raise ValueError("in_channels and hidden must be positive")


@dataclass
class NetOutputs:
    main_logits: T.Tensor  # N,H,W,C
    aux_logits: T.Tensor  # N,H,W,C
    embeddings: T.Tensor  # N,H,W,D, unit norm per pixel


@dataclass
class SegNet:
    config: SegNetConfig
    params: dict[str, T.Tensor] = field(default_factory=dict)

    def parameters(self) -> list[T.Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return int(np.sum([p.size for p in self.params.values()]))

    def copy(self) -> "SegNet":
        return SegNet(
            SegNetConfig(**asdict(self.config)),
            {k: T.parameter(v.data.copy(), name=k) for k, v in self.params.items()},
        )


def _param_shapes(cfg: SegNetConfig) -> list[tuple[str, tuple[int, ...], int]]:
    """(name, shape, fan_in) in declaration order."""
    shapes = []
    cin = cfg.in_channels
    for i in range(cfg.depth):
        shapes.append((f"trunk{i}.w", (3, 3, cin, cfg.hidden), 9 * cin))
        shapes.append((f"trunk{i}.b", (cfg.hidden,), 9 * cin))
        cin = cfg.hidden
    for head, out in (("main", cfg.num_classes), ("aux", cfg.num_classes), ("embed", cfg.embed_dim)):
        shapes.append((f"{head}.w", (cfg.hidden, out), cfg.hidden))
        shapes.append((f"{head}.b", (out,), cfg.hidden))
    return shapes


def init(config: SegNetConfig, seed: int) -> SegNet:
    config.validate()
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape, fan_in in _param_shapes(config):
        # He-uniform for weights, PyTorch-style fan-in bound for biases
        bound = np.sqrt(6.0 / fan_in) if name.endswith(".w") else 1.0 / np.sqrt(fan_in)
        params[name] = T.parameter(rng.uniform(-bound, bound, size=shape), name=name)
    return SegNet(config, params)


def forward(net: SegNet, images) -> NetOutputs:
    """Run the network on ``(H,W,F)`` or ``(N,H,W,F)`` images."""
    x = T.as_tensor(images)
    if x.ndim == 3:
        x = T.reshape(x, (1,) + x.shape)
    if x.ndim != 4 or x.shape[3] != net.config.in_channels:
        raise ValueError(
            f"forward: expected {net.config.in_channels} input channels, got image shape {x.shape}"
        )
    p = net.params
    feats = []
    h = T.sub(x, INPUT_OFFSET)
    for i in range(net.config.depth):
        h = T.relu(T.conv2d(h, p[f"trunk{i}.w"], p[f"trunk{i}.b"]))
        feats.append(h)
    main = T.matmul(feats[-1], p["main.w"]) + p["main.b"]
    aux = T.matmul(feats[-2], p["aux.w"]) + p["aux.b"]
    emb = T.l2_normalize(T.matmul(feats[-1], p["embed.w"]) + p["embed.b"], axis=-1)
    return NetOutputs(main, aux, emb)


def argmax_map(logits: np.ndarray) -> np.ndarray:
    """Per-pixel argmax over the last axis; ties go to the lowest index."""
    return np.argmax(logits, axis=-1)


def predict(net: SegNet, images) -> np.ndarray:
    out = forward(net, images)
    probs = T.softmax(out.main_logits).data
    pred = argmax_map(probs)
    return pred[0] if np.ndim(images) == 3 else pred


class SGD:
    """SGD with momentum and L2 weight decay (decay added to the gradient)."""

    def __init__(self, params: list[T.Tensor], momentum: float = 0.9, weight_decay: float = 1e-4):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros(p.shape) for p in params]

    def step(self, grads: dict[T.Tensor, np.ndarray], lr: float):
        for p, v in zip(self.params, self.velocity):
            g = grads.get(p)
            if g is None:
                g = np.zeros(p.shape)
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter {p.name}")
            g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data = p.data - lr * v


def apply_gradients(net: SegNet, grads, learning_rate: float, optimizer: SGD | None = None,
                    momentum: float = 0.9, weight_decay: float = 1e-4) -> SGD:
    """One SGD step on ``net`` in place; returns the optimizer holding momentum state."""
    if optimizer is None:
        optimizer = SGD(net.parameters(), momentum, weight_decay)
    optimizer.step(grads, learning_rate)
    return optimizer


# ---------------------------------------------------------------- checkpoint
# layout (little-endian): magic[8] | 5 x int32 config | uint32 n_params |
# per param: uint32 ndim | ndim x uint32 dims | float64 data


def save_checkpoint(net: SegNet, path) -> None:
    cfg = net.config
    buf = bytearray(CHECKPOINT_MAGIC)
    buf += struct.pack("<5i", *(getattr(cfg, f) for f in _CONFIG_FIELDS))
    buf += struct.pack("<I", len(net.params))
    for p in net.params.values():
        buf += struct.pack("<I", p.ndim)
        buf += struct.pack(f"<{p.ndim}I", *p.shape)
        buf += p.data.astype("<f8").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path) -> SegNet:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic at offset 0")
    off = 8

    def read(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(raw):
            raise ValueError(f"{path}: truncated checkpoint at offset {off}, need {size} bytes")
        vals = struct.unpack_from(fmt, raw, off)
        off += size
        return vals

    cfg = SegNetConfig(**dict(zip(_CONFIG_FIELDS, read("<5i"))))
    cfg.validate()
    (n,) = read("<I")
    expected = _param_shapes(cfg)
    if n != len(expected):
        raise ValueError(f"{path}: checkpoint has {n} parameters, config implies {len(expected)}")
    params = {}
    for name, shape, _ in expected:
        (ndim,) = read("<I")
        dims = read(f"<{ndim}I")
        if tuple(dims) != shape:
            raise ValueError(f"{path}: parameter {name} has shape {dims}, expected {shape}")
        count = int(np.prod(shape))
        if off + 8 * count > len(raw):
            raise ValueError(f"{path}: truncated checkpoint at offset {off}")
        data = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape)
        off += 8 * count
        params[name] = T.parameter(data.astype(np.float64), name=name)
    if off != len(raw):
        raise ValueError(f"{path}: {len(raw) - off} trailing bytes after offset {off}")
    return SegNet(cfg, params)

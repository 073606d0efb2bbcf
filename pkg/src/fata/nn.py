"""Layers for the toy encoders: conv/linear blocks with BN, GN or LN.

Normalization affine parameters (gamma, beta) are the only tensors updated at
test time; everything else is frozen after pretraining.

Checkpoint format (JSON, UTF-8, keys sorted, no whitespace)::

    {"format": "fata-checkpoint", "version": 1,
     "config": {...StackConfig fields...},
     "tensors": {"<name>": {"shape": [..], "data": [flat row-major floats]}, ...}}

Values are written with Python's shortest round-trip float repr, so a file is
byte-identical whenever the stored values are.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

NORM_KINDS = ("batch", "group", "layer", "none")
CHECKPOINT_FORMAT = "fata-checkpoint"
CHECKPOINT_VERSION = 1


class NormLayer:
    """Per-channel affine normalization of [B, C] or [B, C, H, W] inputs.

    ``mode`` is one of ``train`` (batch statistics, running stats updated),
    ``adapt`` (batch statistics, running stats untouched) or ``eval``
    (running stats for the batch kind). Group and layer kinds normalize each
    sample on its own, so all three modes coincide for them.
    """

    def __init__(
        self,
        kind: str,
        channels: int,
        num_groups: int = 1,
        eps: float = 1e-5,
        momentum: float = 0.1,
    ) -> None:
        if kind not in ("batch", "group", "layer"):
            raise ValueError(f"unknown norm kind {kind!r}")
        if kind == "layer":
            num_groups = 1
        if kind == "group" and (num_groups < 1 or channels % num_groups):
            raise ValueError(f"num_groups={num_groups} must divide channels={channels}")
        self.kind = kind
        self.channels = channels
        self.num_groups = num_groups
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.adaptable = True
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.last_degenerate = False

    def parameters(self) -> list[Tensor]:
        return [self.gamma, self.beta]

    def normalize(self, x: Tensor, mode: str = "adapt") -> Tensor:
        """Pre-affine normalized activations."""
        if x.ndim not in (2, 4) or x.shape[1] != self.channels:
            raise T.ShapeError(f"{self.kind}_norm", x.shape, (self.channels,))
        four_d = x.ndim == 4
        if x.ndim == 2:
            x = x.reshape(x.shape[0], x.shape[1], 1, 1)
        B, C, H, W = x.shape
        self.last_degenerate = False
        if self.kind == "batch":
            if mode == "eval":
                mu = self.running_mean.reshape(1, C, 1, 1)
                v = self.running_var.reshape(1, C, 1, 1)
                xhat = (x - mu) / np.sqrt(v + self.eps)
            else:
                mu = T.mean(x, axis=(0, 2, 3), keepdims=True)
                v = T.var(x, axis=(0, 2, 3), keepdims=True)
                xhat = (x - mu) / T.sqrt(v + self.eps)
                self.last_degenerate = B == 1 and mode == "adapt"
                if mode == "train":
                    n = B * H * W
                    unbiased = v.data.reshape(C) * n / max(n - 1, 1)
                    m = self.momentum
                    self.running_mean = (1 - m) * self.running_mean + m * mu.data.reshape(C)
                    self.running_var = (1 - m) * self.running_var + m * unbiased
        else:
            G = self.num_groups
            xg = x.reshape(B, G, (C // G) * H * W)
            mu = T.mean(xg, axis=2, keepdims=True)
            v = T.var(xg, axis=2, keepdims=True)
            xhat = ((xg - mu) / T.sqrt(v + self.eps)).reshape(B, C, H, W)
        if not four_d:
            xhat = xhat.reshape(B, C)
        return xhat

    def __call__(self, x: Tensor, mode: str = "adapt") -> Tensor:
        xhat = self.normalize(x, mode)
        shape = (1, self.channels) + (1,) * (xhat.ndim - 2)
        return xhat * self.gamma.reshape(shape) + self.beta.reshape(shape)


class Conv3x3:
    def __init__(self, cin: int, cout: int, rng: np.random.Generator) -> None:
        std = np.sqrt(2.0 / (cin * 9))
        self.weight = Tensor(rng.normal(0.0, std, (cout, cin, 3, 3)), requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight) + self.bias.reshape(1, -1, 1, 1)


class Linear:
    def __init__(self, din: int, dout: int, rng: np.random.Generator, gain: float = 2.0) -> None:
        std = np.sqrt(gain / din)
        self.weight = Tensor(rng.normal(0.0, std, (din, dout)), requires_grad=True)
        self.bias = Tensor(np.zeros(dout), requires_grad=True)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def __call__(self, x: Tensor) -> Tensor:
        return T.matmul(x, self.weight) + self.bias


@dataclass
class StackConfig:
    """Architecture of a toy encoder plus classifier.

    ``input_shape`` excludes the batch axis: ``(d,)`` selects linear blocks,
    ``(C, H, W)`` selects 3x3 conv blocks.
    """

    input_shape: tuple[int, ...] = (3, 8, 8)
    widths: tuple[int, ...] = (16, 16, 32, 32)
    num_classes: int = 10
    norm: str = "group"
    num_groups: int = 4
    activation: str = "relu"
    eps: float = 1e-5
    pool_after: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.widths = tuple(int(v) for v in self.widths)
        self.pool_after = tuple(int(v) for v in self.pool_after)
        if self.pool_after and len(self.input_shape) != 3:
            raise ValueError("pool_after needs image inputs")
        if any(not 0 <= k < len(self.widths) for k in self.pool_after):
            raise ValueError(f"pool_after indices must lie in [0, {len(self.widths) - 1}]")
        if any(n % (1 << len(set(self.pool_after))) for n in self.input_shape[1:]):
            raise ValueError("too many pooling stages for the input size")
        if len(self.input_shape) not in (1, 3):
            raise ValueError(f"input_shape must be (d,) or (C, H, W), got {self.input_shape}")
        if self.norm not in NORM_KINDS:
            raise ValueError(f"norm must be one of {NORM_KINDS}, got {self.norm!r}")
        if self.activation not in ("relu", "gelu"):
            raise ValueError(f"activation must be relu or gelu, got {self.activation!r}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.norm == "group":
            for w in self.widths:
                if w % self.num_groups:
                    raise ValueError(f"num_groups={self.num_groups} must divide width {w}")

    @property
    def is_conv(self) -> bool:
        return len(self.input_shape) == 3


def avg_pool2(x: Tensor) -> Tensor:
    B, C, H, W = x.shape
    return T.mean(x.reshape(B, C, H // 2, 2, W // 2, 2), axis=(3, 5))


class Block:
    """One encoder layer: conv-or-linear, optional norm, nonlinearity, optional 2x2 pooling."""

    def __init__(self, din: int, dout: int, cfg: StackConfig, rng: np.random.Generator,
                 pool: bool = False) -> None:
        self.transform = Conv3x3(din, dout, rng) if cfg.is_conv else Linear(din, dout, rng)
        self.norm = (
            NormLayer(cfg.norm, dout, cfg.num_groups, cfg.eps) if cfg.norm != "none" else None
        )
        self.act = T.relu if cfg.activation == "relu" else T.gelu
        self.pool = pool
        self.out_channels = dout

    def parameters(self) -> list[Tensor]:
        params = self.transform.parameters()
        if self.norm is not None:
            params += self.norm.parameters()
        return params

    def __call__(self, x: Tensor, mode: str = "adapt") -> Tensor:
        h = self.transform(x)
        if self.norm is not None:
            h = self.norm(h, mode)
        h = self.act(h)
        return avg_pool2(h) if self.pool else h


class LayerStack:
    """Encoder layers f^1..f^N followed by classifier g (global pool + linear)."""

    def __init__(self, cfg: StackConfig, rng: np.random.Generator | int = 0) -> None:
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        self.config = cfg
        dims = (cfg.input_shape[0],) + cfg.widths
        self.layers = [
            Block(dims[k], dims[k + 1], cfg, rng, pool=k in cfg.pool_after)
            for k in range(len(cfg.widths))
        ]
        self.classifier = Linear(dims[-1], cfg.num_classes, rng, gain=1.0)

    def __len__(self) -> int:
        return len(self.layers)

    def layer_output_shape(self, i: int) -> tuple[int, ...]:
        """Per-sample shape after layer ``i`` (0-based)."""
        c = self.config.widths[i]
        if not self.config.is_conv:
            return (c,)
        shrink = 1 << sum(1 for k in set(self.config.pool_after) if k <= i)
        return (c,) + tuple(n // shrink for n in self.config.input_shape[1:])

    def norm_layers(self) -> list[NormLayer]:
        return [blk.norm for blk in self.layers if blk.norm is not None]

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for k, blk in enumerate(self.layers):
            yield f"layers.{k}.weight", blk.transform.weight
            yield f"layers.{k}.bias", blk.transform.bias
            if blk.norm is not None:
                yield f"layers.{k}.norm.gamma", blk.norm.gamma
                yield f"layers.{k}.norm.beta", blk.norm.beta
        yield "classifier.weight", self.classifier.weight
        yield "classifier.bias", self.classifier.bias

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        for k, blk in enumerate(self.layers):
            if blk.norm is not None and blk.norm.kind == "batch":
                yield f"layers.{k}.norm.running_mean", blk.norm.running_mean
                yield f"layers.{k}.norm.running_var", blk.norm.running_var

    def head(self, h: Tensor) -> Tensor:
        """Classifier logits from the last encoder feature."""
        if h.ndim == 4:
            h = T.mean(h, axis=(2, 3))
        return self.classifier(h)

    def snapshot(self) -> dict[str, np.ndarray]:
        out = {name: p.data.copy() for name, p in self.named_parameters()}
        out.update({name: b.copy() for name, b in self.buffers()})
        return out

    def load_snapshot(self, snap: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            p.data = np.asarray(snap[name], dtype=p.data.dtype).reshape(p.shape).copy()
        for k, blk in enumerate(self.layers):
            if blk.norm is not None and blk.norm.kind == "batch":
                blk.norm.running_mean = np.asarray(snap[f"layers.{k}.norm.running_mean"], float)
                blk.norm.running_var = np.asarray(snap[f"layers.{k}.norm.running_var"], float)


def adaptable_parameters(stack: LayerStack) -> list[Tensor]:
    """gamma/beta of every normalization layer; conv, linear and classifier excluded."""
    params: list[Tensor] = []
    for norm in stack.norm_layers():
        if norm.adaptable:
            params += [norm.gamma, norm.beta]
    return params


@dataclass
class SGD:
    """SGD with optional heavy-ball momentum (PyTorch convention, no dampening)."""

    params: list[Tensor]
    lr: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    _velocity: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        if self.lr == 0:
            return
        for p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            if self.momentum:
                v = self._velocity.get(id(p))
                v = g.copy() if v is None else self.momentum * v + g
                self._velocity[id(p)] = v
                g = v
            p.data = (p.data - self.lr * g).astype(p.data.dtype)


# ---------------------------------------------------------------- checkpoint I/O


def _config_to_json(cfg: StackConfig) -> dict:
    d = asdict(cfg)
    d["input_shape"] = list(cfg.input_shape)
    d["widths"] = list(cfg.widths)
    d["pool_after"] = list(cfg.pool_after)
    return d


def checkpoint_bytes(stack: LayerStack, extra: dict | None = None) -> bytes:
    tensors = {
        name: {"shape": list(arr.shape), "data": [float(v) for v in np.ravel(arr)]}
        for name, arr in stack.snapshot().items()
    }
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": _config_to_json(stack.config),
        "tensors": tensors,
    }
    if extra:
        doc["extra"] = extra
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(stack: LayerStack, path: str | Path, extra: dict | None = None) -> Path:
    path = Path(path)
    path.write_bytes(checkpoint_bytes(stack, extra))
    return path


class CheckpointError(ValueError):
    pass


def load_checkpoint(
    path: str | Path, expect: StackConfig | None = None
) -> tuple[LayerStack, dict]:
    """Rebuild a stack from a checkpoint; ``expect`` guards against config drift."""
    try:
        doc = json.loads(Path(path).read_text("utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: not a version-{CHECKPOINT_VERSION} {CHECKPOINT_FORMAT}")
    cfg = StackConfig(**doc["config"])
    if expect is not None and _config_to_json(expect) != _config_to_json(cfg):
        raise CheckpointError(
            f"{path}: checkpoint architecture {_config_to_json(cfg)} does not match "
            f"requested {_config_to_json(expect)}"
        )
    stack = LayerStack(cfg, rng=0)
    snap = {}
    for name, arr in stack.snapshot().items():
        entry = doc["tensors"].get(name)
        if entry is None:
            raise CheckpointError(f"{path}: missing tensor {name}")
        if tuple(entry["shape"]) != arr.shape:
            raise CheckpointError(
                f"{path}: tensor {name} has shape {tuple(entry['shape'])}, model expects {arr.shape}"
            )
        snap[name] = np.asarray(entry["data"], dtype=np.float64).reshape(arr.shape)
    stack.load_snapshot(snap)
    return stack, doc.get("extra", {})

"""Synthetic source tasks, corruption families and scenario-ordered streams.

Inputs live in [0, 1]. Corruptions are applied to clean inputs and clamped
back into range.

Severity tables (severity 1..5; severity 0 is the identity):

=============  ==========================================  ==============================
family         transform                                   parameter by severity 1..5
=============  ==========================================  ==============================
gauss_noise    x + N(0, s)                                 s = .1 .2 .3 .4 .5
impulse_noise  pixel set to 0 or 1 with probability p      p = .05 .1 .2 .3 .4
blur_box       mean over a k x k window (edge-replicated)  k = 3 3 4 4 5
contrast       m + c (x - m), m the per-sample mean        c = .5 .35 .25 .18 .13
brightness     x + b                                       b = .1 .2 .35 .5 .58
=============  ==========================================  ==============================

Vector (blobs) inputs use the same tables; blur averages ``k`` neighbouring
features.

Dataset dump format: ``b"FATADS01"``, a little-endian uint32 header length,
a UTF-8 JSON header (task fields, split, seed, n, x shape, version), then
``x`` as little-endian float32 and ``y`` as little-endian int64, both
row-major.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

FAMILIES = ("gauss_noise", "impulse_noise", "blur_box", "contrast", "brightness")
SCENARIOS = ("normal", "batch1", "label_shift")
SEVERITY_TABLE: dict[str, tuple[float, ...]] = {
    "gauss_noise": (0.1, 0.2, 0.3, 0.4, 0.5),
    "impulse_noise": (0.05, 0.1, 0.2, 0.3, 0.4),
    "blur_box": (3, 3, 4, 4, 5),
    "contrast": (0.5, 0.35, 0.25, 0.18, 0.13),
    "brightness": (0.1, 0.2, 0.35, 0.5, 0.58),
}
DATASET_MAGIC = b"FATADS01"
DATASET_VERSION = 1


def _split_seed(*parts) -> np.random.SeedSequence:
    ints = [p if isinstance(p, int) else zlib.crc32(str(p).encode()) for p in parts]
    return np.random.SeedSequence(ints)


@dataclass
class SyntheticTask:
    """``blobs``: Gaussian clusters in R^dims. ``patterns``: 3x8x8 coloured gratings.

    ``separation`` scales the class signal relative to the per-pixel
    ``noise`` (blob centre spread, or grating amplitude). Each pattern also
    carries a distractor grating of another class whose amplitude, relative
    to the true one, is uniform on ``[0, clutter]``.
    """

    kind: str = "patterns"
    num_classes: int = 10
    dims: int = 16
    separation: float = 10.0
    noise: float = 0.03
    clutter: float = 1.1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("blobs", "patterns"):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")

    @property
    def input_shape(self) -> tuple[int, ...]:
        return (self.dims,) if self.kind == "blobs" else (3, 8, 8)

    def blob_centers(self) -> np.ndarray:
        rng = np.random.default_rng(_split_seed(self.seed, "centers"))
        u = rng.normal(size=(self.num_classes, self.dims))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        return 0.5 + 0.5 * self.separation * self.noise * u

    def pattern_params(self) -> dict[str, np.ndarray]:
        rng = np.random.default_rng(_split_seed(self.seed, "patterns"))
        C = self.num_classes
        theta = (np.arange(C) * np.pi / C) + rng.uniform(0, np.pi / (4 * C), C)
        freq = np.where(np.arange(C) % 2 == 0, 1.5, 2.5)
        color = rng.uniform(-1.0, 1.0, size=(C, 3))
        color /= np.abs(color).max(axis=1, keepdims=True)
        return {"theta": theta, "freq": freq, "color": color}


def generate_pool(task: SyntheticTask, n: int, split: str = "train") -> tuple[np.ndarray, np.ndarray]:
    """``n`` class-balanced labelled examples; a pure function of (task, n, split)."""
    C = task.num_classes
    if n < C:
        raise ValueError(f"pool size n={n} is smaller than num_classes={C}")
    rng = np.random.default_rng(_split_seed(task.seed, split, n))
    y = rng.permutation(np.arange(n) % C)
    if task.kind == "blobs":
        x = task.blob_centers()[y] + rng.normal(0.0, task.noise, size=(n, task.dims))
    else:
        x = _render_patterns(task, y, rng)
    return np.clip(x, 0.0, 1.0).astype(np.float32), y.astype(np.int64)


def _render_patterns(task: SyntheticTask, y: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = y.shape[0]
    amp = task.separation * task.noise * rng.uniform(0.8, 1.2, n)
    x = 0.5 + rng.uniform(-0.1, 0.1, n)[:, None, None, None] + _grating(task, y, amp, rng)
    if task.clutter > 0:
        other = (y + rng.integers(1, task.num_classes, n)) % task.num_classes
        x = x + _grating(task, other, amp * rng.uniform(0.0, task.clutter, n), rng)
    return x + rng.normal(0.0, task.noise, size=x.shape)


def _grating(task: SyntheticTask, cls: np.ndarray, amp: np.ndarray,
             rng: np.random.Generator) -> np.ndarray:
    p = task.pattern_params()
    n = cls.shape[0]
    u, v = np.meshgrid(np.arange(8), np.arange(8), indexing="ij")
    theta = p["theta"][cls] + rng.normal(0.0, 0.05, n)
    phase = rng.uniform(0.0, 2 * np.pi, n)
    proj = np.cos(theta)[:, None, None] * u + np.sin(theta)[:, None, None] * v
    wave = np.sin(2 * np.pi * p["freq"][cls][:, None, None] * proj / 8.0 + phase[:, None, None])
    return (amp[:, None, None, None] * p["color"][cls][:, :, None, None]) * wave[:, None]


@dataclass
class CorruptionSpec:
    family: str = "gauss_noise"
    severity: int = 5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.family not in FAMILIES:
            raise ValueError(f"unknown corruption family {self.family!r}; expected one of {FAMILIES}")
        if not 0 <= self.severity <= 5:
            raise ValueError(f"severity must be in 0..5, got {self.severity}")

    @property
    def parameter(self) -> float | None:
        return None if self.severity == 0 else SEVERITY_TABLE[self.family][self.severity - 1]


def _box_blur(x: np.ndarray, k: int) -> np.ndarray:
    """k-wide moving average over the trailing one (vectors) or two (images) axes."""
    lo, hi = (k - 1) // 2, k // 2
    spatial = (x.ndim - 1) if x.ndim == 2 else 2
    for ax in range(x.ndim - spatial, x.ndim):
        pad = [(0, 0)] * x.ndim
        pad[ax] = (lo, hi)
        xp = np.pad(x, pad, mode="edge")
        win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=ax)
        x = win.mean(axis=-1)
    return x


def corrupt(x: np.ndarray, spec: CorruptionSpec) -> np.ndarray:
    """Apply one corruption; deterministic in ``(x, spec)``."""
    if spec.family not in FAMILIES:
        raise ValueError(f"unknown corruption family {spec.family!r}")
    x = np.asarray(x, dtype=np.float32)
    if spec.severity == 0:
        return x.copy()
    s = spec.parameter
    rng = np.random.default_rng(_split_seed(spec.seed, spec.family, spec.severity))
    xd = x.astype(np.float64)
    if spec.family == "gauss_noise":
        out = xd + rng.normal(0.0, s, size=x.shape)
    elif spec.family == "impulse_noise":
        hit = rng.random(x.shape) < s
        salt = rng.random(x.shape) < 0.5
        out = np.where(hit, salt.astype(np.float64), xd)
    elif spec.family == "blur_box":
        out = _box_blur(xd, int(s))
    elif spec.family == "contrast":
        axes = tuple(range(1, x.ndim))
        m = xd.mean(axis=axes, keepdims=True)
        out = m + s * (xd - m)
    else:
        out = xd + s
    return np.clip(out, 0.0, 1.0).astype(np.float32)


@dataclass
class StreamSpec:
    scenario: str = "normal"
    batch_size: int = 64
    num_batches: int | None = None
    corruption: CorruptionSpec = field(default_factory=CorruptionSpec)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}; expected one of {SCENARIOS}")
        if isinstance(self.corruption, dict):
            self.corruption = CorruptionSpec(**self.corruption)
        if self.scenario == "batch1":
            self.batch_size = 1
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def stream_order(y: np.ndarray, spec: StreamSpec) -> np.ndarray:
    rng = np.random.default_rng(_split_seed(spec.seed, "stream"))
    order = rng.permutation(len(y))
    if spec.scenario == "label_shift":
        order = order[np.argsort(y[order], kind="stable")]
    return order


def make_stream(pool: tuple[np.ndarray, np.ndarray], spec: StreamSpec) -> list[tuple[np.ndarray, np.ndarray]]:
    """Corrupt the pool and cut it into ordered batches (each element once)."""
    x, y = pool
    if len(y) < spec.batch_size:
        raise ValueError(f"pool of {len(y)} is smaller than batch_size={spec.batch_size}")
    xc = corrupt(x, spec.corruption)
    order = stream_order(y, spec)
    bs = spec.batch_size
    batches = [(xc[order[k : k + bs]], y[order[k : k + bs]]) for k in range(0, len(order), bs)]
    if spec.num_batches is not None:
        batches = batches[: spec.num_batches]
    return batches


# ---------------------------------------------------------------- dump / load


def dump_dataset(path: str | Path, x: np.ndarray, y: np.ndarray, task: SyntheticTask,
                 split: str = "train") -> Path:
    header = {
        "version": DATASET_VERSION,
        "task": asdict(task),
        "split": split,
        "n": int(len(y)),
        "x_shape": list(x.shape),
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<I", len(hb)))
        fh.write(hb)
        fh.write(np.ascontiguousarray(x, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(y, dtype="<i8").tobytes())
    return path


def load_dataset(path: str | Path) -> tuple[np.ndarray, np.ndarray, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != DATASET_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:8]!r}")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    if header.get("version") != DATASET_VERSION:
        raise ValueError(f"{path}: unsupported dataset version {header.get('version')}")
    shape = tuple(header["x_shape"])
    off = 12 + hlen
    nx = int(np.prod(shape)) * 4
    x = np.frombuffer(raw, dtype="<f4", count=int(np.prod(shape)), offset=off).reshape(shape)
    y = np.frombuffer(raw, dtype="<i8", count=header["n"], offset=off + nx)
    return x.astype(np.float32), y.astype(np.int64), header

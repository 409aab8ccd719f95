"""Twin-chain multi-view network: five conv blocks, slice, view pool, concat, two FC layers."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import (
    Tensor,
    concat_batch,
    conv2d,
    flatten,
    fully_connected,
    maxpool2d,
    no_grad,
    relu,
    slice_batch,
    view_pool,
)
from .errors import ConfigurationError, LoadError, UsageError

DEFAULT_CHANNELS = (32, 64, 128, 256, 512)
ETH_CHANNELS = (16, 32, 64, 128, 256)

MAGIC = b"MDPW"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class NetworkConfig:
    conv_channels: tuple = DEFAULT_CHANNELS
    input_size: tuple = (64, 64, 1)  # (H, W, channels)
    views_per_group: int = 3
    batch_size: int = 12
    fc1_width: int = 512
    embedding_dim: int = 128
    num_classes: int = 8
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        object.__setattr__(self, "input_size", tuple(int(c) for c in self.input_size))
        if len(self.conv_channels) != 5 or min(self.conv_channels) < 1:
            raise ConfigurationError(f"conv_channels must be 5 positive counts, got {self.conv_channels}")
        if len(self.input_size) != 3 or min(self.input_size) < 1:
            raise ConfigurationError(f"input_size must be (H, W, channels), got {self.input_size}")
        if self.views_per_group < 1 or self.batch_size < 1:
            raise ConfigurationError("views_per_group and batch_size must be >= 1")
        if self.embedding_dim < 2 or self.fc1_width < 1:
            raise ConfigurationError(f"embedding_dim must be >= 2, got {self.embedding_dim}")
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError(f"dtype must be float32 or float64, got {self.dtype}")

    @classmethod
    def eth(cls, **kw) -> "NetworkConfig":
        return cls(conv_channels=ETH_CHANNELS, **kw)

    def spatial_trace(self) -> list:
        """(H, W) after each conv block, following pools; raises on collapse."""
        h, w, _ = self.input_size
        dims = []
        for i in range(5):
            # 3x3 conv, pad 1, stride 1 keeps size; 2x2/2 pool follows every block
            if h < 2 or w < 2:
                raise ConfigurationError(
                    f"conv{i + 1}: spatial size {(h, w)} too small for the 2x2 pool after it"
                )
            h, w = (h - 2) // 2 + 1, (w - 2) // 2 + 1
            dims.append((h, w))
        return dims

    def param_shapes(self) -> dict:
        shapes = {}
        k_in = self.input_size[2]
        for i, k_out in enumerate(self.conv_channels, start=1):
            shapes[f"conv{i}.weight"] = (k_out, k_in, 3, 3)
            shapes[f"conv{i}.bias"] = (k_out,)
            k_in = k_out
        h, w = self.spatial_trace()[-1]
        flat = self.conv_channels[-1] * h * w
        shapes["fc1.weight"] = (flat, self.fc1_width)
        shapes["fc1.bias"] = (self.fc1_width,)
        shapes["fc2.weight"] = (self.fc1_width, self.embedding_dim)
        shapes["fc2.bias"] = (self.embedding_dim,)
        shapes["centers"] = (self.num_classes, self.embedding_dim)
        return shapes


@dataclass
class ModelWeights:
    """All learnable tensors. Both chains read this single object."""

    config: NetworkConfig
    params: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    @property
    def centers(self) -> Tensor:
        return self.params["centers"]

    def parameters(self) -> list:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def copy(self) -> "ModelWeights":
        return ModelWeights(
            self.config,
            {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.params.items()},
        )

    def state(self) -> dict:
        return {k: v.data for k, v in self.params.items()}


@dataclass
class GroupPairBatch:
    views_a: np.ndarray  # (B*V, K, H, W)
    views_b: np.ndarray
    labels_a: np.ndarray  # (B,)
    labels_b: np.ndarray
    pair_labels: np.ndarray  # (B,)

    def __post_init__(self):
        expected = (self.labels_a == self.labels_b).astype(np.int64)
        if not np.array_equal(expected, np.asarray(self.pair_labels)):
            raise UsageError("pair labels must be 1 exactly when the two group labels match")

    @property
    def size(self) -> int:
        return len(self.pair_labels)


def build(config: NetworkConfig, seed: int = 0) -> ModelWeights:
    """He-initialised weights, zero biases and zero class centers."""
    shapes = config.param_shapes()
    rng = np.random.default_rng(seed)
    dtype = np.dtype(config.dtype)
    params = {}
    for name, shape in shapes.items():
        if name.endswith(".weight"):
            fan_in = int(np.prod(shape[1:])) if name.startswith("conv") else shape[0]
            data = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data.astype(dtype), requires_grad=True)
    return ModelWeights(config, params)


def _trunk(weights: ModelWeights, x: Tensor) -> Tensor:
    for i in range(1, 6):
        x = relu(conv2d(x, weights[f"conv{i}.weight"], weights[f"conv{i}.bias"], stride=1, pad=1))
        if i < 5:
            x = maxpool2d(x, 2, 2)
    return x


def forward_chain(weights: ModelWeights, views) -> Tensor:
    """Embed B groups of V contiguous views; returns (B, embedding_dim)."""
    cfg = weights.config
    v = cfg.views_per_group
    x = views if isinstance(views, Tensor) else Tensor(views, dtype=cfg.dtype)
    if x.data.ndim != 4:
        raise UsageError(f"views must be (N, K, H, W), got {x.shape}")
    n = x.shape[0]
    if n == 0 or n % v:
        raise UsageError(f"N={n} views is not a positive multiple of views_per_group={v}")
    h, w, k = cfg.input_size
    if x.shape[1:] != (k, h, w):
        raise UsageError(f"view shape {x.shape[1:]} does not match network input {(k, h, w)}")

    fmap = _trunk(weights, x)
    groups = slice_batch(fmap, [v] * (n // v))
    pooled = [view_pool(slice_batch(g, [1] * v)) for g in groups]
    # spatial max is exact, so pooling once after the concat equals pooling each group
    fmap = maxpool2d(concat_batch(pooled), 2, 2)
    hidden = relu(fully_connected(flatten(fmap), weights["fc1.weight"], weights["fc1.bias"]))
    return fully_connected(hidden, weights["fc2.weight"], weights["fc2.bias"])


def forward_pair(weights: ModelWeights, batch: GroupPairBatch) -> tuple:
    return forward_chain(weights, batch.views_a), forward_chain(weights, batch.views_b)


def embed(weights: ModelWeights, views: np.ndarray, chunk: int = 32) -> np.ndarray:
    """Inference-only embeddings for (G*V, K, H, W) views, processed in chunks of groups."""
    v = weights.config.views_per_group
    out = []
    with no_grad():
        for start in range(0, views.shape[0], chunk * v):
            out.append(forward_chain(weights, views[start:start + chunk * v]).data)
    return np.concatenate(out, axis=0)


# ---------------------------------------------------------------------------
# persistence


def save_weights(weights: ModelWeights, path) -> None:
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(weights.params))]
    for name, t in weights.params.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{t.data.ndim}I", t.data.ndim, *t.data.shape))
        chunks.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_weights(path, config: NetworkConfig) -> ModelWeights:
    """Read a weights file and check it against ``config``."""
    blob = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise LoadError(f"{path}: truncated at byte {pos} (needed {n} more)")
        out = blob[pos:pos + n]
        pos += n
        return out

    if take(4) != MAGIC:
        raise LoadError(f"{path}: not a weights file (bad magic)")
    version, count = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise LoadError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    expected = config.param_shapes()
    if count != len(expected):
        raise LoadError(f"{path}: holds {count} tensors, config expects {len(expected)}")

    dtype = np.dtype(config.dtype)
    params = {}
    for (exp_name, exp_shape) in expected.items():
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        if name != exp_name or tuple(shape) != exp_shape:
            raise LoadError(f"{path}: expected {exp_name} {exp_shape}, found {name} {tuple(shape)}")
        size = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape)
        params[name] = Tensor(data.astype(dtype), requires_grad=True)
    if pos != len(blob):
        raise LoadError(f"{path}: {len(blob) - pos} trailing bytes")
    return ModelWeights(config, params)

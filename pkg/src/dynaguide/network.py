"""The refinement CNN: conv blocks with identity skips, a 1x1 classifier, and a final BN."""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import RunConfig
from .exceptions import ConfigurationError, InputError
from .tensor import Tensor

SNAPSHOT_MAGIC = b"DYNAGPAR"
SNAPSHOT_VERSION = 1

# config fields that determine parameter layout
_STRUCTURAL = ("p", "q", "block_count", "kernel_size")


@dataclass
class NetworkParams:
    config: RunConfig
    tensors: dict[str, Tensor]

    def __iter__(self):
        return iter(self.tensors.values())

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def named(self):
        return self.tensors.items()

    @property
    def size(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.config, {
            name: Tensor(t.data.copy(), requires_grad=t.requires_grad, name=name)
            for name, t in self.tensors.items()})


@dataclass
class ResponseMap:
    """Normalized response ``[q, H, W]`` plus the argmax assignment it implies."""

    response: Tensor
    labels: np.ndarray
    q_active: int

    @property
    def q(self) -> int:
        return self.response.shape[0]


def parameter_shapes(config: RunConfig) -> dict[str, tuple[int, ...]]:
    k = config.kernel_size
    shapes: dict[str, tuple[int, ...]] = {}
    c_in = 3
    for b in range(config.block_count):
        shapes[f"block{b}.kernel"] = (config.p, c_in, k, k)
        shapes[f"block{b}.bias"] = (config.p,)
        shapes[f"block{b}.gamma"] = (config.p,)
        shapes[f"block{b}.beta"] = (config.p,)
        c_in = config.p
    shapes["classifier.kernel"] = (config.q, config.p, 1, 1)
    shapes["classifier.bias"] = (config.q,)
    shapes["out_bn.gamma"] = (config.q,)
    shapes["out_bn.beta"] = (config.q,)
    return shapes


def parameter_count(config: RunConfig) -> int:
    """Closed-form parameter count."""
    p, q, k, n = config.p, config.q, config.kernel_size, config.block_count
    first = 3 * p * k * k + 3 * p
    rest = (n - 1) * (p * p * k * k + 3 * p)
    head = q * p + q + 2 * q
    return first + rest + head


def init_params(config: RunConfig, seed: int | None = None) -> NetworkParams:
    """Fan-in scaled normal kernels, zero biases, unit gamma and zero beta.

    Kernel std is ``init_gain * sqrt(2 / fan_in)``. Every conv feeds a batch
    norm, so the gain only sets the effective step size of the first updates.
    """
    rng = np.random.default_rng(config.seed if seed is None else seed)
    tensors = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".kernel"):
            fan_in = int(np.prod(shape[1:]))
            data = rng.standard_normal(shape) * (config.init_gain * np.sqrt(2.0 / fan_in))
        elif name.endswith(".gamma"):
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        trainable = config.output_affine or not name.startswith("out_bn.")
        tensors[name] = Tensor(data, requires_grad=trainable, name=name)
    return NetworkParams(config, tensors)


def features(params: NetworkParams, image: Tensor) -> Tensor:
    cfg = params.config
    pad = (cfg.kernel_size - 1) // 2
    x = image
    for b in range(cfg.block_count):
        h = T.conv2d(x, params[f"block{b}.kernel"], params[f"block{b}.bias"], pad,
                     cfg.padding_mode)
        h = T.batch_norm(h, params[f"block{b}.gamma"], params[f"block{b}.beta"], cfg.bn_eps)
        h = T.relu(h)
        # block 0 changes channel count 3 -> p, so it has no identity path
        x = T.add(h, x) if cfg.use_skip and b > 0 else h
    return x


def forward(params: NetworkParams, image) -> ResponseMap:
    """Run the network on a ``[3, H, W]`` image with values in [0, 1]."""
    if not isinstance(image, Tensor):
        image = Tensor(image)
    if image.data.ndim != 3 or image.shape[0] != 3:
        raise InputError(f"image must be [3, H, W], got shape {image.shape}")
    _, h, w = image.shape
    k = params.config.kernel_size
    if h < k or w < k:
        raise InputError(f"image must be at least {k}x{k} pixels, got {h}x{w}")
    x = features(params, image)
    r = T.conv2d(x, params["classifier.kernel"], params["classifier.bias"], 0)
    r = T.batch_norm(r, params["out_bn.gamma"], params["out_bn.beta"], params.config.bn_eps)
    labels = assign_labels(r.data)
    return ResponseMap(r, labels, int(np.unique(labels).size))


def assign_labels(response) -> np.ndarray:
    """Per-pixel argmax over channels; ties resolve to the lowest channel index."""
    data = response.response.data if isinstance(response, ResponseMap) else response
    if isinstance(data, Tensor):
        data = data.data
    return np.argmax(data, axis=0)


# --- snapshots ----------------------------------------------------------


def config_hash(config: RunConfig) -> bytes:
    layout = {name: getattr(config, name) for name in _STRUCTURAL}
    return hashlib.sha256(json.dumps(layout, sort_keys=True).encode()).digest()[:16]


def save_params(params: NetworkParams, path: str | Path) -> None:
    """Write ``magic | version | hash | count | table | float64 LE payload``."""
    table = bytearray()
    payload = bytearray()
    for name, t in params.named():
        encoded = name.encode()
        table += struct.pack("<H", len(encoded)) + encoded
        table += struct.pack("<B", t.data.ndim) + struct.pack(f"<{t.data.ndim}I", *t.shape)
        payload += t.data.astype("<f8").tobytes()
    header = SNAPSHOT_MAGIC + struct.pack("<H", SNAPSHOT_VERSION) + config_hash(params.config)
    header += struct.pack("<I", len(params.tensors))
    Path(path).write_bytes(bytes(header + table + payload))


def load_params(path: str | Path, config: RunConfig) -> NetworkParams:
    blob = Path(path).read_bytes()
    if blob[:8] != SNAPSHOT_MAGIC:
        raise InputError(f"{path}: not a parameter snapshot")
    version, = struct.unpack_from("<H", blob, 8)
    if version != SNAPSHOT_VERSION:
        raise InputError(f"{path}: unsupported snapshot version {version}")
    if blob[10:26] != config_hash(config):
        raise ConfigurationError(f"{path}: snapshot layout does not match the given config")
    count, = struct.unpack_from("<I", blob, 26)
    pos = 30
    entries = []
    for _ in range(count):
        n, = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + n].decode()
        pos += n
        ndim, = struct.unpack_from("<B", blob, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        entries.append((name, shape))
    tensors = {}
    for name, shape in entries:
        size = int(np.prod(shape))
        if pos + 8 * size > len(blob):
            raise InputError(f"{path}: truncated snapshot payload")
        data = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(shape)
        pos += 8 * size
        tensors[name] = Tensor(data.astype(np.float64), requires_grad=True, name=name)
    expected = parameter_shapes(config)
    if {n: t.shape for n, t in tensors.items()} != expected:
        raise ConfigurationError(f"{path}: tensor table does not match the given config")
    return NetworkParams(config, tensors)

"""SIREN coordinate network with residual blocks, flat parameters and manual backprop.

Architecture: ``h = sin(w0 (W0 z + b0))``, then residual blocks of sine
layers ``h <- h + sin(w0 (W2 sin(w0 (W1 h + b1)) + b2))``, then a linear
output. Rows are evaluated independently, so the map is mesh-agnostic.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .fem import Discretization

CHECKPOINT_MAGIC = b"MNTOCKP1"
PROVENANCE_TAGS = ("standard-init", "meta-learned", "pretrained")


class ChecksumError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    in_features: int = 3
    hidden: int = 256
    hidden_layers: int = 4
    block_size: int = 2
    omega0: float = 60.0

    def __post_init__(self):
        if self.in_features not in (2, 3):
            raise ValueError("in_features must be 3 (x, y, E) or 2 (unconditioned)")
        if self.hidden < 1 or self.hidden_layers < 0 or self.block_size < 1:
            raise ValueError(f"invalid layer sizes in {self}")
        if self.omega0 <= 0:
            raise ValueError("omega0 must be positive")

    @property
    def conditioned(self) -> bool:
        return self.in_features == 3

    @cached_property
    def layout(self) -> list[tuple[str, tuple[int, ...], int]]:
        """(name, shape, offset) for every parameter tensor, in storage order."""
        shapes = [("W_in", (self.hidden, self.in_features)), ("b_in", (self.hidden,))]
        for i in range(self.hidden_layers):
            shapes += [(f"W{i}", (self.hidden, self.hidden)), (f"b{i}", (self.hidden,))]
        shapes += [("W_out", (1, self.hidden)), ("b_out", (1,))]
        out, offset = [], 0
        for name, shape in shapes:
            out.append((name, shape, offset))
            offset += int(np.prod(shape))
        return out

    @property
    def blocks(self) -> list[range]:
        """Hidden-layer indices grouped into residual blocks; a short tail forms its own block."""
        n, k = self.hidden_layers, self.block_size
        return [range(i, min(i + k, n)) for i in range(0, n, k)]


def count_params(cfg: NetworkConfig) -> int:
    h, n = cfg.hidden, cfg.hidden_layers
    return cfg.in_features * h + h + n * (h * h + h) + h + 1


@dataclass(eq=False)
class NetworkParameters:
    config: NetworkConfig
    values: np.ndarray
    seed: int = 0
    provenance: str = "standard-init"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (count_params(self.config),):
            raise ValueError(
                f"parameter vector has {self.values.size} entries, layout needs {count_params(self.config)}"
            )
        if self.provenance not in PROVENANCE_TAGS:
            raise ValueError(f"unknown provenance {self.provenance!r}")

    def copy(self, values: np.ndarray | None = None, provenance: str | None = None) -> NetworkParameters:
        return NetworkParameters(
            self.config,
            self.values.copy() if values is None else values,
            self.seed,
            provenance or self.provenance,
        )


def unpack(cfg: NetworkConfig, theta: np.ndarray) -> dict[str, np.ndarray]:
    """Views into ``theta`` keyed by tensor name."""
    return {
        name: theta[offset:offset + int(np.prod(shape))].reshape(shape)
        for name, shape, offset in cfg.layout
    }


def init_standard(cfg: NetworkConfig, seed: int) -> NetworkParameters:
    """SIREN initialization: first layer U(+-1/fan_in), later U(+-sqrt(6/fan_in)/w0), zero biases."""
    rng = np.random.default_rng(seed)
    theta = np.zeros(count_params(cfg))
    views = unpack(cfg, theta)
    for name, shape, _ in cfg.layout:
        if not name.startswith("W"):
            continue
        fan_in = shape[1]
        bound = 1.0 / fan_in if name == "W_in" else np.sqrt(6.0 / fan_in) / cfg.omega0
        views[name][...] = rng.uniform(-bound, bound, size=shape)
    return NetworkParameters(cfg, theta, seed=seed, provenance="standard-init")


def network_inputs(disc: Discretization, energy: np.ndarray | None = None) -> np.ndarray:
    """Stack normalized centroids with the processed strain energy, one row per element."""
    if energy is None:
        return disc.centroids.copy()
    energy = np.asarray(energy, dtype=float)
    if energy.shape != (disc.n_elem,):
        raise ValueError(f"energy has shape {energy.shape}, expected ({disc.n_elem},)")
    return np.column_stack([disc.centroids, energy])


@dataclass(eq=False)
class ForwardCache:
    inputs: np.ndarray
    # per sine layer: (layer input, cos of pre-activation)
    layers: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    last_hidden: np.ndarray | None = None


def forward(
    cfg: NetworkConfig, theta: np.ndarray, inputs: np.ndarray, keep_cache: bool = False
) -> np.ndarray | tuple[np.ndarray, ForwardCache]:
    inputs = np.asarray(inputs, dtype=float)
    if inputs.ndim != 2 or inputs.shape[1] != cfg.in_features:
        raise ValueError(f"inputs must be (N, {cfg.in_features}), got {inputs.shape}")
    p = unpack(cfg, theta)
    w0 = cfg.omega0
    cache = ForwardCache(inputs)

    def sine(x, W, b):
        # scaling the weights is cheaper than scaling the (N, hidden) activations
        pre = x @ (w0 * W).T + w0 * b
        if keep_cache:
            cache.layers.append((x, np.cos(pre)))
        return np.sin(pre)

    h = sine(inputs, p["W_in"], p["b_in"])
    for block in cfg.blocks:
        y = h
        for i in block:
            y = sine(y, p[f"W{i}"], p[f"b{i}"])
        h = h + y
    out = h @ p["W_out"][0] + p["b_out"][0]
    if keep_cache:
        cache.last_hidden = h
        return out, cache
    return out


def backward(cfg: NetworkConfig, theta: np.ndarray, cache: ForwardCache, cotangent: np.ndarray) -> np.ndarray:
    """Gradient of ``<cotangent, forward(theta)>`` with respect to ``theta``."""
    p = unpack(cfg, theta)
    grad = np.zeros_like(theta)
    g = unpack(cfg, grad)
    w0 = cfg.omega0
    cot = np.asarray(cotangent, dtype=float)

    g["W_out"][0] = cot @ cache.last_hidden
    g["b_out"][0] = cot.sum()
    dh = np.outer(cot, p["W_out"][0])

    layers = iter(reversed(cache.layers))

    def sine_back(d_out, W_name, b_name):
        x, cos_pre = next(layers)
        d_pre = d_out * cos_pre
        g[W_name][...] = w0 * (d_pre.T @ x)
        g[b_name][...] = w0 * d_pre.sum(axis=0)
        return d_pre @ (w0 * p[W_name])

    for block in reversed(cfg.blocks):
        dy = dh
        for i in reversed(block):
            dy = sine_back(dy, f"W{i}", f"b{i}")
        dh = dh + dy
    sine_back(dh, "W_in", "b_in")
    return grad


def _header(params: NetworkParameters) -> bytes:
    meta = {
        "config": asdict(params.config),
        "seed": params.seed,
        "provenance": params.provenance,
        "n_params": int(params.values.size),
        "layout": [[name, list(shape), offset] for name, shape, offset in params.config.layout],
    }
    return json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()


def save_checkpoint(params: NetworkParameters, path: str | Path) -> None:
    """Write ``magic | u32 header length | JSON header | float64 LE values | sha256``."""
    header = _header(params)
    body = CHECKPOINT_MAGIC + struct.pack("<I", len(header)) + header + params.values.astype("<f8").tobytes()
    Path(path).write_bytes(body + hashlib.sha256(body).digest())


def load_checkpoint(path: str | Path) -> NetworkParameters:
    raw = Path(path).read_bytes()
    body, digest = raw[:-32], raw[-32:]
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path} is not a network checkpoint")
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError(f"checksum mismatch in {path}")
    (n,) = struct.unpack_from("<I", body, len(CHECKPOINT_MAGIC))
    start = len(CHECKPOINT_MAGIC) + 4
    meta = json.loads(body[start:start + n])
    values = np.frombuffer(body[start + n:], dtype="<f8").astype(np.float64)
    cfg = NetworkConfig(**meta["config"])
    return NetworkParameters(cfg, values, seed=meta["seed"], provenance=meta["provenance"])

"""Residual MLP with hand-written forward/backward passes, Adam and checkpoints.

Topology: an embedding sub-block, ``residual_blocks`` residual blocks of two
sub-blocks each wrapped by a skip connection, then an output linear layer.
A sub-block is linear -> batch-norm -> ReLU -> dropout.

All arithmetic is float64. Weights are stored ``(fan_in, fan_out)`` so a
layer computes ``x @ W + b``.
"""

from __future__ import annotations

import copy
import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import (
    BatchTooSmallError,
    CorruptCheckpointError,
    IncompatibleCheckpointError,
    SequencingError,
    UpdateRejectedError,
)

BN_MOMENTUM = 0.1
BN_EPS = 1e-5

CHECKPOINT_MAGIC = b"ESCN"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetworkConfig:
    input_dim: int = 51
    hidden_dim: int = 512
    residual_blocks: int = 1
    output_dim: int = 12
    dropout_rate: float = 0.3
    seed: int = 0

    def __post_init__(self):
        for name in ("input_dim", "hidden_dim", "output_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.residual_blocks < 0:
            raise ValueError("residual_blocks must be >= 0")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")

    def architecture(self) -> tuple:
        return (self.input_dim, self.hidden_dim, self.residual_blocks, self.output_dim)


def hidden_layer_names(config: NetworkConfig) -> list[str]:
    names = ["embed"]
    for i in range(config.residual_blocks):
        names += [f"block{i}.a", f"block{i}.b"]
    return names


@dataclass
class ForwardCache:
    version: int
    training: bool
    x: np.ndarray
    layers: dict = field(default_factory=dict)


class Network:
    def __init__(self, config: NetworkConfig = NetworkConfig()):
        self.config = config
        self.training = True
        self.version = 0
        self.params: dict[str, np.ndarray] = {}
        self.running: dict[str, np.ndarray] = {}
        rng = np.random.default_rng(config.seed)
        h = config.hidden_dim
        fan_in = config.input_dim
        for name in hidden_layer_names(config):
            self._init_linear(rng, name, fan_in, h)
            self.params[f"{name}.gamma"] = np.ones(h)
            self.params[f"{name}.beta"] = np.zeros(h)
            self.running[f"{name}.mean"] = np.zeros(h)
            self.running[f"{name}.var"] = np.ones(h)
            fan_in = h
        self._init_linear(rng, "out", h, config.output_dim)

    def _init_linear(self, rng, name, fan_in, fan_out):
        w_bound = np.sqrt(6.0 / fan_in)
        b_bound = 1.0 / np.sqrt(fan_in)
        self.params[f"{name}.W"] = rng.uniform(-w_bound, w_bound, size=(fan_in, fan_out))
        self.params[f"{name}.b"] = rng.uniform(-b_bound, b_bound, size=fan_out)

    def train(self) -> "Network":
        self.training = True
        return self

    def eval(self) -> "Network":
        self.training = False
        return self

    def copy(self) -> "Network":
        return copy.deepcopy(self)

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for store in (self.params, self.running):
            for name, arr in store.items():
                digest.update(name.encode())
                digest.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return digest.hexdigest()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def bump_version(self):
        self.version += 1

    # forward / backward

    def __call__(self, x: np.ndarray) -> np.ndarray:
        out, _ = self.forward(x)
        return out

    def forward(self, x: np.ndarray, rng: Optional[np.random.Generator] = None,
                training: Optional[bool] = None):
        """Run the network on a ``(B, input_dim)`` batch.

        Returns the output and a cache for :meth:`backward`. In train mode
        dropout masks are drawn from ``rng`` and batch-norm running
        statistics are updated. ``training`` overrides the mode flag for this
        call only, which lets shared networks run in eval mode without
        mutating them.
        """
        training = self.training if training is None else training
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.config.input_dim:
            raise ValueError(f"expected (B, {self.config.input_dim}) batch, got {x.shape}")
        if training and x.shape[0] < 2:
            raise BatchTooSmallError("train-mode forward needs at least 2 samples for batch statistics")
        if training and rng is None:
            rng = np.random.default_rng(self.config.seed)
        cache = ForwardCache(self.version, training, x)
        h = self._sub_forward("embed", x, rng, cache)
        for i in range(self.config.residual_blocks):
            a = self._sub_forward(f"block{i}.a", h, rng, cache)
            b = self._sub_forward(f"block{i}.b", a, rng, cache)
            h = h + b
        cache.layers["out.in"] = h
        out = h @ self.params["out.W"] + self.params["out.b"]
        return out, cache

    def _sub_forward(self, name, x, rng, cache):
        p = self.params
        training = cache.training
        z = x @ p[f"{name}.W"] + p[f"{name}.b"]
        if training:
            mu = z.mean(axis=0)
            var = z.var(axis=0)
            n = z.shape[0]
            self.running[f"{name}.mean"] = (1 - BN_MOMENTUM) * self.running[f"{name}.mean"] + BN_MOMENTUM * mu
            self.running[f"{name}.var"] = (1 - BN_MOMENTUM) * self.running[f"{name}.var"] + BN_MOMENTUM * var * n / (n - 1)
        else:
            mu = self.running[f"{name}.mean"]
            var = self.running[f"{name}.var"]
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (z - mu) * inv_std
        y = p[f"{name}.gamma"] * xhat + p[f"{name}.beta"]
        a = np.maximum(y, 0.0)
        rate = self.config.dropout_rate
        if training and rate > 0:
            mask = (rng.random(a.shape) >= rate) / (1.0 - rate)
            out = a * mask
        else:
            mask = None
            out = a
        cache.layers[name] = (x, xhat, inv_std, y, mask)
        return out

    def backward(self, cache: ForwardCache, dout: np.ndarray):
        """Backpropagate ``dout`` (gradient w.r.t. the output).

        Returns ``(grads, dx)``: a dict of parameter gradients keyed like
        ``params`` and the gradient w.r.t. the network input.
        """
        if cache.version != self.version:
            raise SequencingError("activation cache is stale: parameters changed since forward")
        dout = np.asarray(dout, dtype=np.float64)
        grads = {}
        h = cache.layers["out.in"]
        grads["out.W"] = h.T @ dout
        grads["out.b"] = dout.sum(axis=0)
        dh = dout @ self.params["out.W"].T
        for i in reversed(range(self.config.residual_blocks)):
            db = dh
            da = self._sub_backward(f"block{i}.b", db, cache, grads)
            dh = dh + self._sub_backward(f"block{i}.a", da, cache, grads)
        dx = self._sub_backward("embed", dh, cache, grads)
        ordered = {name: grads[name] for name in self.params}
        return ordered, dx

    def _sub_backward(self, name, dout, cache, grads):
        x, xhat, inv_std, y, mask = cache.layers[name]
        p = self.params
        da = dout * mask if mask is not None else dout
        dy = da * (y > 0)
        grads[f"{name}.gamma"] = (dy * xhat).sum(axis=0)
        grads[f"{name}.beta"] = dy.sum(axis=0)
        dxhat = dy * p[f"{name}.gamma"]
        if cache.training:
            n = dxhat.shape[0]
            dz = inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        else:
            dz = dxhat * inv_std
        grads[f"{name}.W"] = x.T @ dz
        grads[f"{name}.b"] = dz.sum(axis=0)
        return dz @ p[f"{name}.W"].T


# optimizer


@dataclass
class AdamState:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(net: Network, grads: dict, state: AdamState) -> None:
    """Apply one bias-corrected Adam update to ``net`` in place."""
    for name, g in grads.items():
        if name not in net.params or g.shape != net.params[name].shape:
            raise ValueError(f"gradient {name!r} does not match a parameter")
        if not np.all(np.isfinite(g)):
            raise UpdateRejectedError(f"non-finite gradient for {name}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, g in grads.items():
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(g)
            v = np.zeros_like(g)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name] = m
        state.v[name] = v
        net.params[name] = net.params[name] - state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    net.bump_version()


# checkpoints


def save_checkpoint(net: Network, path) -> None:
    header = json.dumps(
        {"config": asdict(net.config), "training": net.training}, sort_keys=True
    ).encode()
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION), struct.pack("<I", len(header)), header]
    for store in (net.params, net.running):
        for name, arr in store.items():
            key = name.encode()
            data = np.ascontiguousarray(arr, dtype="<f8").ravel()
            chunks += [struct.pack("<I", len(key)), key, struct.pack("<Q", data.size), data.tobytes()]
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CorruptCheckpointError("checkpoint is truncated")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))[0]


def load_checkpoint(path, expected: Optional[NetworkConfig] = None) -> Network:
    """Read a checkpoint written by :func:`save_checkpoint`.

    If ``expected`` is given, its layer dimensions must match the stored
    configuration.
    """
    reader = _Reader(Path(path).read_bytes())
    if len(reader.blob) < 4 or reader.take(4) != CHECKPOINT_MAGIC:
        raise IncompatibleCheckpointError("not an ESCN checkpoint (bad magic)")
    version = reader.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise IncompatibleCheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(reader.take(reader.unpack("<I")).decode())
        config = NetworkConfig(**header["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptCheckpointError(f"unreadable config block: {exc}") from exc
    if expected is not None and expected.architecture() != config.architecture():
        raise IncompatibleCheckpointError(
            f"checkpoint architecture {config.architecture()} != expected {expected.architecture()}"
        )
    net = Network(config)
    for store in (net.params, net.running):
        for name, arr in store.items():
            key = reader.take(reader.unpack("<I")).decode()
            if key != name:
                raise CorruptCheckpointError(f"expected tensor {name!r}, found {key!r}")
            count = reader.unpack("<Q")
            if count != arr.size:
                raise CorruptCheckpointError(f"tensor {name!r} has {count} values, expected {arr.size}")
            store[name] = np.frombuffer(reader.take(8 * count), dtype="<f8").astype(np.float64).reshape(arr.shape)
    if reader.pos != len(reader.blob):
        raise CorruptCheckpointError("trailing bytes after last tensor")
    net.training = bool(header.get("training", False))
    return net

"""Learnable parameters, the optimizer schedule and checkpoint files."""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from .autodiff import Tensor
from .errors import ContractError, FormatError

CHECKPOINT_MAGIC = b"PCJC"
CHECKPOINT_VERSION = 1


class Parameter(Tensor):
    """Named leaf tensor tracked by the optimizer."""

    __slots__ = ()

    def __init__(self, name, values):
        super().__init__(np.asarray(values, dtype=np.float64), requires_grad=True, name=name)


class ParameterStore:
    """Flat registry of named parameters with deterministic ordering."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def create(self, name, shape, fill=0.0):
        if name in self._params:
            raise ContractError(f"duplicate parameter {name}")
        param = Parameter(name, np.full(shape, float(fill)))
        self._params[name] = param
        return param

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def names(self):
        return sorted(self._params)

    def items(self):
        return [(name, self._params[name]) for name in self.names()]

    def values(self):
        return [self._params[name] for name in self.names()]

    def zero_grad(self):
        for p in self._params.values():
            p.grad = None

    def state_arrays(self):
        return {name: p.data.copy() for name, p in self.items()}

    def load_state(self, arrays):
        missing = set(self._params) - set(arrays)
        extra = set(arrays) - set(self._params)
        if missing or extra:
            raise ContractError(f"parameter name mismatch (missing={sorted(missing)}, extra={sorted(extra)})")
        for name, p in self._params.items():
            values = np.asarray(arrays[name], dtype=np.float64)
            if values.shape != p.data.shape:
                raise ContractError(f"shape mismatch for {name}")
            p.data = values.copy()


def glorot_init(store: ParameterStore, seed, skip=()):
    """Seeded uniform(-s, s) init with s = sqrt(6 / (fan_in + fan_out)).

    Weights are drawn in sorted-name order so initialization is
    reproducible; biases and names listed in ``skip`` stay zero.
    """
    rng = np.random.default_rng(seed)
    for name, param in store.items():
        if name in skip or name.endswith(".bias") or param.data.ndim == 1:
            continue
        shape = param.data.shape
        if param.data.ndim == 3:  # (taps, c_in, c_out)
            fan_in = shape[0] * shape[1]
            fan_out = shape[0] * shape[2]
        else:
            fan_in, fan_out = shape[0], shape[-1]
        s = np.sqrt(6.0 / (fan_in + fan_out))
        param.data = rng.uniform(-s, s, size=shape)


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------


def lr_schedule(epoch, base_lr):
    """Step decay: multiply by 0.1 every 50 epochs."""
    if epoch < 0:
        raise ContractError("epoch must be >= 0")
    return base_lr * 0.1 ** (epoch // 50)


def clip_grad_norm(params, threshold):
    """Scale all gradients so their global L2 norm is at most ``threshold``.

    Returns the applied factor (1.0 when no clipping was needed).
    """
    total = 0.0
    grads = []
    for p in params:
        if p.grad is None:
            continue
        grads.append(p)
        total += float(np.sum(p.grad * p.grad))
    norm = np.sqrt(total)
    if norm <= threshold or norm == 0.0:
        return 1.0
    factor = threshold / norm
    for p in grads:
        p.grad = p.grad * factor
    return factor


class AdamState:
    """Adam with bias correction (beta1=0.9, beta2=0.999, eps=1e-8)."""

    def __init__(self, params, learning_rate=1e-3, beta1=0.9, beta2=0.999, eps=1e-8,
                 clip_threshold=1.0):
        self.learning_rate = float(learning_rate)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.clip_threshold = clip_threshold
        self.step_count = 0
        self.m = {p.name: np.zeros_like(p.data) for p in params}
        self.v = {p.name: np.zeros_like(p.data) for p in params}

    def step(self, params):
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for p in params:
            if p.grad is None:
                continue
            m = self.m[p.name]
            v = self.v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * (p.grad * p.grad)
            p.data = p.data - self.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_arrays(self):
        out = {"__step__": np.array([self.step_count], dtype=np.float64)}
        for name, m in self.m.items():
            out[f"m::{name}"] = m.copy()
        for name, v in self.v.items():
            out[f"v::{name}"] = v.copy()
        return out

    def load_state(self, arrays):
        self.step_count = int(arrays["__step__"][0])
        for name in self.m:
            self.m[name] = np.asarray(arrays[f"m::{name}"], dtype=np.float64).copy()
            self.v[name] = np.asarray(arrays[f"v::{name}"], dtype=np.float64).copy()


def adam_step(state: AdamState, params):
    state.step(params)


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------


def config_hash(config_dict) -> int:
    """Stable 64-bit hash of a configuration mapping."""
    blob = json.dumps(config_dict, sort_keys=True, separators=(",", ":")).encode()
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "big")


def _write_array_block(fh, arrays):
    fh.write(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        data = np.ascontiguousarray(arrays[name], dtype="<f8")
        encoded = name.encode("utf-8")
        fh.write(struct.pack("<H", len(encoded)))
        fh.write(encoded)
        fh.write(struct.pack("<B", data.ndim))
        for dim in data.shape:
            fh.write(struct.pack("<I", dim))
        fh.write(data.tobytes())


def _read_array_block(fh):
    (count,) = struct.unpack("<I", fh.read(4))
    arrays = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", fh.read(2))
        name = fh.read(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<B", fh.read(1))
        shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(ndim))
        n = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(shape)
        arrays[name] = data.copy()
    return arrays


def save_checkpoint(path, config_dict, param_arrays, optimizer_arrays=None, meta=None):
    """Versioned container of named tensors, serialized in name order."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<H", CHECKPOINT_VERSION))
        blob = json.dumps(
            {"config": config_dict, "meta": meta or {}}, sort_keys=True
        ).encode("utf-8")
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        _write_array_block(fh, param_arrays)
        fh.write(struct.pack("<B", 1 if optimizer_arrays else 0))
        if optimizer_arrays:
            _write_array_block(fh, optimizer_arrays)


def load_checkpoint(path):
    """Returns (config_dict, meta, param_arrays, optimizer_arrays_or_None)."""
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise FormatError("not a checkpoint file")
        (version,) = struct.unpack("<H", fh.read(2))
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        (blob_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(blob_len).decode("utf-8"))
        params = _read_array_block(fh)
        (has_opt,) = struct.unpack("<B", fh.read(1))
        optimizer = _read_array_block(fh) if has_opt else None
    return header["config"], header.get("meta", {}), params, optimizer

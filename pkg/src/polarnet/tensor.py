"""Dense channel-major feature maps and 1x1 linear projections.

Feature maps are plain numpy arrays of shape ``(C, H, W)``.  Float64 is used on
every verification path, float32 on the benchmark path.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO

import numpy as np


class DimensionError(ValueError):
    """Raised when array shapes do not line up."""


def as_feature_map(x, dtype=None) -> np.ndarray:
    x = np.asarray(x, dtype=dtype)
    if x.ndim != 3 or min(x.shape) < 1:
        raise DimensionError(f"expected a (C, H, W) feature map, got shape {x.shape}")
    return x


@dataclass
class LinearProjection:
    """Per-position linear map ``out[c] = bias[c] + sum_k weight[c, k] * x[k]``."""

    weight: np.ndarray
    bias: np.ndarray
    weight_grad: np.ndarray = field(init=False, repr=False)
    bias_grad: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.weight = np.asarray(self.weight)
        self.bias = np.asarray(self.bias, dtype=self.weight.dtype)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise DimensionError(
                f"weight {self.weight.shape} and bias {self.bias.shape} are inconsistent")
        self.zero_grad()

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def init(cls, in_channels: int, out_channels: int, rng: np.random.Generator,
             gain: float = 1.0, dtype=np.float64) -> "LinearProjection":
        """He-style random init with zero bias."""
        std = gain * np.sqrt(2.0 / in_channels)
        w = rng.standard_normal((out_channels, in_channels)) * std
        return cls(w.astype(dtype), np.zeros(out_channels, dtype=dtype))

    @classmethod
    def identity(cls, channels: int, dtype=np.float64) -> "LinearProjection":
        return cls(np.eye(channels, dtype=dtype), np.zeros(channels, dtype=dtype))

    def zero_grad(self):
        self.weight_grad = np.zeros_like(self.weight)
        self.bias_grad = np.zeros_like(self.bias)

    def astype(self, dtype) -> "LinearProjection":
        return LinearProjection(self.weight.astype(dtype), self.bias.astype(dtype))

    def params(self):
        return [(self.weight, self.weight_grad), (self.bias, self.bias_grad)]


def project(p: LinearProjection, x: np.ndarray) -> np.ndarray:
    """Apply a 1x1 convolution to a ``(C, H, W)`` map."""
    x = as_feature_map(x)
    if x.shape[0] != p.in_channels:
        raise DimensionError(
            f"projection expects {p.in_channels} channels, got {x.shape[0]}")
    c, h, w = x.shape
    if x.dtype == np.float64:
        # sequential reduction over input channels: reproducible to the last bit
        # against a plain loop, which BLAS blocking does not guarantee
        return np.einsum("ck,khw->chw", p.weight, x) + p.bias[:, None, None]
    out = p.weight @ x.reshape(c, h * w)
    out += p.bias[:, None]
    return out.reshape(p.out_channels, h, w)


def project_backward(p: LinearProjection, x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Accumulate weight/bias gradients into ``p`` and return the input gradient."""
    c, h, w = x.shape
    g = grad_out.reshape(p.out_channels, h * w)
    p.weight_grad += g @ x.reshape(c, h * w).T
    p.bias_grad += g.sum(axis=1)
    return (p.weight.T @ g).reshape(c, h, w)


def softmax(v: np.ndarray, axis: int = 0) -> np.ndarray:
    """Numerically stable softmax along ``axis``."""
    v = np.asarray(v)
    e = np.exp(v - v.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(prob: np.ndarray, grad_prob: np.ndarray, axis: int = 0) -> np.ndarray:
    return prob * (grad_prob - (prob * grad_prob).sum(axis=axis, keepdims=True))


# Binary dump format: magic(4s) dtype(u8) C H W (u32, little-endian), then raw values.
_DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}
_HEADER = struct.Struct("<4sBIII")


def write_array(fh: BinaryIO, arr: np.ndarray, magic: bytes = b"PFM1"):
    arr = np.asarray(arr)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1, 1)
    elif arr.ndim == 2:
        arr = arr.reshape(arr.shape[0], arr.shape[1], 1)
    dt = arr.dtype.newbyteorder("<")
    if dt not in _DTYPE_CODES:
        raise DimensionError(f"unsupported dtype {arr.dtype}")
    fh.write(_HEADER.pack(magic, _DTYPE_CODES[dt], *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def read_array(fh: BinaryIO, magic: bytes = b"PFM1") -> np.ndarray:
    head = fh.read(_HEADER.size)
    if len(head) != _HEADER.size:
        raise EOFError("truncated feature map header")
    got, code, c, h, w = _HEADER.unpack(head)
    if got != magic:
        raise ValueError(f"bad magic {got!r}, expected {magic!r}")
    dt = _CODE_DTYPES[code]
    n = c * h * w
    buf = fh.read(n * dt.itemsize)
    if len(buf) != n * dt.itemsize:
        raise EOFError("truncated feature map payload")
    return np.frombuffer(buf, dtype=dt).reshape(c, h, w).astype(dt.newbyteorder("="))


def write_projection(fh: BinaryIO, p: LinearProjection):
    write_array(fh, p.weight)
    write_array(fh, p.bias)


def read_projection(fh: BinaryIO) -> LinearProjection:
    w = read_array(fh)
    b = read_array(fh)
    return LinearProjection(w[:, :, 0].copy(), b[:, 0, 0].copy())


def save_feature_map(path, x: np.ndarray, magic: bytes = b"PFM1"):
    with open(path, "wb") as fh:
        write_array(fh, as_feature_map(x), magic)


def load_feature_map(path, magic: bytes = b"PFM1") -> np.ndarray:
    with open(path, "rb") as fh:
        return read_array(fh, magic)

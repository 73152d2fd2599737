"""Parameterized layers built from :mod:`skillrank.autodiff` ops.

Parameters live in a flat ``{name: ndarray}`` mapping.  Each layer kind has
a ``*_layout`` helper describing the tensors it owns (shape and fan sizes
for initialization) and a ``*Params`` view that picks its tensors out of a
mapping by prefix.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


@dataclass(frozen=True)
class ParamSpec:
    shape: tuple[int, ...]
    fan_in: int
    fan_out: int
    is_bias: bool = False


Layout = dict[str, ParamSpec]


def linear_layout(prefix: str, in_features: int, out_features: int, bias: bool = True) -> Layout:
    out = {f"{prefix}.weight": ParamSpec((out_features, in_features), in_features, out_features)}
    if bias:
        out[f"{prefix}.bias"] = ParamSpec((out_features,), in_features, out_features, True)
    return out


def conv2d_layout(prefix: str, in_channels: int, out_channels: int, kernel: int) -> Layout:
    rf = kernel * kernel
    return {
        f"{prefix}.weight": ParamSpec((out_channels, in_channels, kernel, kernel),
                                      in_channels * rf, out_channels * rf),
        f"{prefix}.bias": ParamSpec((out_channels,), in_channels * rf, out_channels * rf, True),
    }


GRU_GATES = ("z", "r", "h")


def gru_layout(prefix: str, input_size: int, hidden_size: int) -> Layout:
    out: Layout = {}
    for g in GRU_GATES:
        out[f"{prefix}.W_{g}"] = ParamSpec((hidden_size, input_size), input_size, hidden_size)
    for g in GRU_GATES:
        out[f"{prefix}.U_{g}"] = ParamSpec((hidden_size, hidden_size), hidden_size, hidden_size)
    for g in GRU_GATES:
        out[f"{prefix}.b_{g}"] = ParamSpec((hidden_size,), input_size, hidden_size, True)
    return out


@dataclass(frozen=True)
class InitSpec:
    scheme: str = "xavier-uniform"
    seed: int = 0


def xavier_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_params(spec: InitSpec, layout: Layout) -> dict[str, np.ndarray]:
    """Xavier-uniform weights and zero biases, drawn in layout order."""
    if spec.scheme != "xavier-uniform":
        raise ValueError(f"unsupported init scheme {spec.scheme!r}")
    rng = np.random.default_rng(spec.seed)
    params = {}
    for name, p in layout.items():
        if any(d < 1 for d in p.shape):
            raise ValueError(f"{name}: dimensions must be positive, got {p.shape}")
        if p.is_bias:
            params[name] = np.zeros(p.shape)
        else:
            bound = xavier_bound(p.fan_in, p.fan_out)
            params[name] = rng.uniform(-bound, bound, size=p.shape)
    return params


# -- layer views -------------------------------------------------------------

@dataclass
class LinearParams:
    weight: Tensor
    bias: Optional[Tensor] = None

    @classmethod
    def select(cls, params: Mapping[str, Tensor], prefix: str) -> "LinearParams":
        return cls(params[f"{prefix}.weight"], params.get(f"{prefix}.bias"))


def linear_forward(p: LinearParams, x: Tensor) -> Tensor:
    if x.shape[-1:] != p.weight.shape[1:]:
        raise ShapeError(f"linear: expected input size {p.weight.shape[1]}, got {x.shape}")
    return ad.linear(x, p.weight, p.bias)


@dataclass
class Conv2dParams:
    weight: Tensor  # [out, in, kh, kw]
    bias: Tensor
    stride: int = 1
    padding: int = 0

    @classmethod
    def select(cls, params: Mapping[str, Tensor], prefix: str, stride: int = 1,
               padding: int = 0) -> "Conv2dParams":
        return cls(params[f"{prefix}.weight"], params[f"{prefix}.bias"], stride, padding)

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.weight.shape[2:]
        return ((h + 2 * self.padding - kh) // self.stride + 1,
                (w + 2 * self.padding - kw) // self.stride + 1)


def conv2d_forward(p: Conv2dParams, x: Tensor) -> Tensor:
    """Cross-correlation of ``x[..., C_in, H, W]`` with the kernels, plus bias."""
    c_out, c_in, kh, kw = p.weight.shape
    if x.ndim < 3 or x.shape[-3] != c_in:
        raise ShapeError(f"conv2d: expected {c_in} input channels, got shape {x.shape}")
    h, w = x.shape[-2:]
    if h + 2 * p.padding < kh or w + 2 * p.padding < kw:
        raise ShapeError(f"conv2d: {h}x{w} input is smaller than the {kh}x{kw} kernel")
    cols = ad.unfold(x, kh, kw, p.stride, p.padding)         # [..., H', W', C_in*kh*kw]
    kernel = ad.reshape(p.weight, (c_out, c_in * kh * kw))
    y = ad.linear(cols, kernel, p.bias)                       # [..., H', W', C_out]
    n = y.ndim
    return ad.transpose(y, tuple(range(n - 3)) + (n - 1, n - 3, n - 2))


@dataclass
class GruParams:
    W_z: Tensor
    W_r: Tensor
    W_h: Tensor
    U_z: Tensor
    U_r: Tensor
    U_h: Tensor
    b_z: Tensor
    b_r: Tensor
    b_h: Tensor

    @classmethod
    def select(cls, params: Mapping[str, Tensor], prefix: str) -> "GruParams":
        return cls(**{k: params[f"{prefix}.{k}"] for k in cls.__dataclass_fields__})

    @property
    def hidden_size(self) -> int:
        return self.U_z.shape[0]

    @property
    def input_size(self) -> int:
        return self.W_z.shape[1]


def gru_step(p: GruParams, x: Tensor, h_prev: Tensor) -> Tensor:
    """One GRU update; ``z`` gates the candidate: ``h' = (1-z)*h + z*h~``."""
    if x.shape[-1] != p.input_size or h_prev.shape[-1] != p.hidden_size:
        raise ShapeError(f"gru: input {x.shape} / state {h_prev.shape} do not match "
                         f"sizes ({p.input_size}, {p.hidden_size})")
    if x.shape[:-1] != h_prev.shape[:-1]:
        raise ShapeError(f"gru: batch shapes differ, {x.shape} vs {h_prev.shape}")
    z = ad.sigmoid(ad.linear(x, p.W_z, p.b_z) + ad.linear(h_prev, p.U_z))
    r = ad.sigmoid(ad.linear(x, p.W_r, p.b_r) + ad.linear(h_prev, p.U_r))
    cand = ad.tanh(ad.linear(x, p.W_h, p.b_h) + ad.linear(r * h_prev, p.U_h))
    return h_prev + z * (cand - h_prev)


# -- serialization -----------------------------------------------------------

PARAMS_MAGIC = b"SKPM"
PARAMS_VERSION = 1


class FormatError(ValueError):
    pass


def save_params(params: Mapping[str, np.ndarray], path) -> None:
    """Write named tensors as float32 little-endian; see README for the layout."""
    chunks = [PARAMS_MAGIC, struct.pack("<II", PARAMS_VERSION, len(params))]
    for name, value in params.items():
        value = np.asarray(value)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{value.ndim}I", value.ndim, *value.shape))
        chunks.append(value.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_params(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    pos = 0

    def read(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"{path}: truncated {what} at byte {pos} "
                              f"(need {n} bytes, {len(buf) - pos} left)")
        out = buf[pos:pos + n]
        pos += n
        return out

    if read(4, "magic") != PARAMS_MAGIC:
        raise FormatError(f"{path}: bad magic at byte 0")
    version, count = struct.unpack("<II", read(8, "header"))
    if version != PARAMS_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at byte 4")
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", read(4, "name length"))
        name = read(nlen, "name").decode("utf-8")
        (ndim,) = struct.unpack("<I", read(4, "rank"))
        shape = struct.unpack(f"<{ndim}I", read(4 * ndim, "shape"))
        size = int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(read(4 * size, f"values of {name}"), dtype="<f4")
        params[name] = values.astype(np.float64).reshape(shape)
    if pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - pos} trailing bytes at byte {pos}")
    return params

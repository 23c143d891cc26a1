"""Dense tensor primitives for forward-only inference.

Feature maps are plain ``numpy`` arrays in batch-channel-height-width order,
stored as 32-bit floats. Every operation here is a pure function: inputs are
never mutated, outputs are freshly allocated float32 arrays, and results are
checked to be finite before they are returned. Convolution and matrix
products accumulate in 64-bit partial sums and round once at the end, which
keeps train/deploy comparisons deterministic.

Multiply-accumulate accounting: when a :func:`count_macs` context is active,
``conv2d``, ``linear``, ``matmul`` and (unfused) ``batchnorm`` report their
MAC work. Pure adds, activations, softmax and pooling count zero, matching
the convention of the cost model in :mod:`facelivt.model`.
"""

from __future__ import annotations

import contextlib
import contextvars
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import erf


class ShapeError(ValueError):
    """Shape or extent mismatch; ``axis`` names the offending axis."""

    def __init__(self, axis: str, message: str):
        self.axis = axis
        super().__init__(f"{axis}: {message}")


class FiniteError(ValueError):
    """A tensor contained NaN or Inf at an operation boundary."""


# ---------------------------------------------------------------------------
# MAC instrumentation
# ---------------------------------------------------------------------------


@dataclass
class MacCounter:
    """Accumulates the multiply-accumulate count of executed operations."""

    total: int = 0

    def add(self, n: int) -> None:
        self.total += int(n)


_counter: contextvars.ContextVar[MacCounter | None] = contextvars.ContextVar(
    "facelivt_mac_counter", default=None
)


@contextlib.contextmanager
def count_macs():
    """Context manager that counts MACs of all ops executed inside it."""
    counter = MacCounter()
    token = _counter.set(counter)
    try:
        yield counter
    finally:
        _counter.reset(token)


def _record(n: int) -> None:
    counter = _counter.get()
    if counter is not None:
        counter.add(n)


# ---------------------------------------------------------------------------
# Parameter bundles
# ---------------------------------------------------------------------------


def _freeze(a: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(np.asarray(a, dtype=np.float32))
    out.flags.writeable = False
    return out


def _freeze64(a: np.ndarray) -> np.ndarray:
    out = a.astype(np.float64)
    out.flags.writeable = False
    return out


@dataclass(frozen=True, eq=False)
class ConvSpec:
    """Convolution parameters: weight [out, in/groups, k, k], bias [out]."""

    weight: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self):
        object.__setattr__(self, "weight", _freeze(self.weight))
        object.__setattr__(self, "bias", _freeze(self.bias))
        if self.weight.ndim != 4:
            raise ShapeError("weight", f"expected rank 4, got {self.weight.ndim}")
        out_ch, _, kh, kw = self.weight.shape
        if kh != kw:
            raise ShapeError("kernel", f"only square kernels supported, got {kh}x{kw}")
        if self.groups < 1 or out_ch % self.groups != 0:
            raise ShapeError("groups", f"{out_ch} output channels not divisible by {self.groups}")
        if self.bias.shape != (out_ch,):
            raise ShapeError("bias", f"expected ({out_ch},), got {self.bias.shape}")
        if self.stride < 1:
            raise ShapeError("stride", f"must be positive, got {self.stride}")
        if self.padding < 0:
            raise ShapeError("padding", f"must be non-negative, got {self.padding}")
        if not np.isfinite(self.weight).all() or not np.isfinite(self.bias).all():
            raise FiniteError("ConvSpec contains non-finite values")
        # Accumulation runs in float64; cache the upcast once per spec.
        object.__setattr__(self, "_weight64", _freeze64(self.weight))
        object.__setattr__(self, "_bias64", _freeze64(self.bias))

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_per_group(self) -> int:
        return self.weight.shape[1]

    @property
    def in_channels(self) -> int:
        return self.groups * self.in_per_group

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]

    @property
    def is_depthwise(self) -> bool:
        return (
            self.in_per_group == 1
            and self.groups == self.in_channels
            and self.groups == self.out_channels
        )

    @property
    def param_count(self) -> int:
        return self.weight.size + self.bias.size


@dataclass(frozen=True, eq=False)
class BnSpec:
    """Inference-time batch-norm parameters.

    ``sigma`` is the stabilized denominator, i.e. sqrt(var + eps) computed
    once when the statistics were accumulated; the forward pass divides by
    it directly so that folding into a convolution is algebraically exact.
    ``eps`` records the stabilizer used at construction.
    """

    gamma: np.ndarray
    beta: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        for name in ("gamma", "beta", "mu", "sigma"):
            object.__setattr__(self, name, _freeze(getattr(self, name)))
        c = self.gamma.shape
        for name in ("beta", "mu", "sigma"):
            if getattr(self, name).shape != c:
                raise ShapeError("channel", f"{name} shape {getattr(self, name).shape} != {c}")
        if self.gamma.ndim != 1:
            raise ShapeError("channel", "batch-norm vectors must be rank 1")
        if not (self.sigma > 0).all():
            raise ValueError("sigma entries must be strictly positive")
        if not self.eps > 0:
            raise ValueError("eps must be positive")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    @property
    def param_count(self) -> int:
        return 4 * self.channels

    @classmethod
    def identity(cls, channels: int, eps: float = 1e-5) -> "BnSpec":
        one = np.ones(channels, dtype=np.float32)
        zero = np.zeros(channels, dtype=np.float32)
        return cls(gamma=one, beta=zero, mu=zero, sigma=one, eps=eps)

    @classmethod
    def from_moments(cls, gamma, beta, mean, var, eps: float = 1e-5) -> "BnSpec":
        sigma = np.sqrt(np.asarray(var, dtype=np.float64) + eps)
        return cls(gamma=gamma, beta=beta, mu=mean, sigma=sigma, eps=eps)


def bn_scale_shift(bn: BnSpec) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel (scale, shift) in float64: y = x * scale + shift."""
    scale = bn.gamma.astype(np.float64) / bn.sigma.astype(np.float64)
    shift = bn.beta.astype(np.float64) - bn.mu.astype(np.float64) * scale
    return scale, shift


# ---------------------------------------------------------------------------
# Validation helpers
# ---------------------------------------------------------------------------


def _as_f32(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(x, dtype=np.float32))


def _check_finite(x: np.ndarray, what: str) -> np.ndarray:
    # Single-pass detector: a float64 sum of float32 values cannot overflow,
    # so it is non-finite exactly when some element is NaN or Inf.
    if not np.isfinite(np.sum(x, dtype=np.float64)):
        raise FiniteError(f"{what} contains NaN or Inf")
    return x


def _require_feature_map(x: np.ndarray) -> np.ndarray:
    x = _as_f32(x)
    if x.ndim != 4:
        raise ShapeError("rank", f"feature map must be rank 4 (BCHW), got rank {x.ndim}")
    return x


def _require_matrix(x: np.ndarray, what: str) -> np.ndarray:
    x = _as_f32(x)
    if x.ndim != 2:
        raise ShapeError("rank", f"{what} must be rank 2, got rank {x.ndim}")
    return x


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def conv2d(x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Grouped 2D cross-correlation with bias.

    Output spatial extents are floor((H + 2*pad - k) / stride) + 1. Dense
    (groups == 1) inputs go through an im2col matrix product; grouped and
    depthwise inputs through a shift-and-accumulate path. Both accumulate
    in float64.
    """
    x = _require_feature_map(x)
    b, c, h, w = x.shape
    if c != spec.in_channels:
        raise ShapeError("channel", f"input has {c} channels, spec expects {spec.in_channels}")
    k, s, p = spec.kernel_size, spec.stride, spec.padding
    out_h = (h + 2 * p - k) // s + 1
    out_w = (w + 2 * p - k) // s + 1
    if out_h <= 0 or out_w <= 0:
        raise ShapeError("spatial", f"kernel {k} stride {s} pad {p} on {h}x{w} yields empty output")

    _record(b * spec.out_channels * spec.in_per_group * k * k * out_h * out_w)

    if spec.groups == 1:
        out = _conv2d_dense(x, spec, out_h, out_w)
    elif spec.is_depthwise:
        out = _conv2d_depthwise(x, spec, out_h, out_w)
    else:
        out = _conv2d_grouped(x, spec, out_h, out_w)
    out += spec._bias64[None, :, None, None]
    return _check_finite(out.astype(np.float32), "conv2d output")


def _padded(x: np.ndarray, p: int) -> np.ndarray:
    xp = x.astype(np.float64)
    if p > 0:
        xp = np.pad(xp, ((0, 0), (0, 0), (p, p), (p, p)))
    return xp


def _conv2d_dense(x: np.ndarray, spec: ConvSpec, out_h: int, out_w: int) -> np.ndarray:
    b, c = x.shape[:2]
    k, s = spec.kernel_size, spec.stride
    xp = _padded(x, spec.padding)
    windows = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    windows = windows[:, :, ::s, ::s][:, :, :out_h, :out_w]  # [b, c, oh, ow, k, k]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(b, out_h * out_w, c * k * k)
    wmat = spec._weight64.reshape(spec.out_channels, c * k * k).T
    out = cols @ wmat  # [b, oh*ow, out_ch]
    return out.transpose(0, 2, 1).reshape(b, spec.out_channels, out_h, out_w)


def _conv2d_depthwise(x: np.ndarray, spec: ConvSpec, out_h: int, out_w: int) -> np.ndarray:
    b, c = x.shape[:2]
    k, s = spec.kernel_size, spec.stride
    xp = _padded(x, spec.padding)
    w = spec._weight64
    out = np.zeros((b, c, out_h, out_w), dtype=np.float64)
    for u in range(k):
        for v in range(k):
            tap = xp[:, :, u : u + s * out_h : s, v : v + s * out_w : s]
            out += tap * w[None, :, 0, u, v, None, None]
    return out


def _conv2d_grouped(x: np.ndarray, spec: ConvSpec, out_h: int, out_w: int) -> np.ndarray:
    b = x.shape[0]
    g, cpg, opg = spec.groups, spec.in_per_group, spec.out_channels // spec.groups
    k, s = spec.kernel_size, spec.stride
    xp = _padded(x, spec.padding).reshape(b, g, cpg, *_padded_hw(x, spec.padding))
    w = spec._weight64.reshape(g, opg, cpg, k, k)
    out = np.zeros((b, g, opg, out_h, out_w), dtype=np.float64)
    for u in range(k):
        for v in range(k):
            tap = xp[:, :, :, u : u + s * out_h : s, v : v + s * out_w : s]
            out += np.einsum("bgchw,goc->bgohw", tap, w[:, :, :, u, v])
    return out.reshape(b, spec.out_channels, out_h, out_w)


def _padded_hw(x: np.ndarray, p: int) -> tuple[int, int]:
    return x.shape[2] + 2 * p, x.shape[3] + 2 * p


def batchnorm(x: np.ndarray, bn: BnSpec) -> np.ndarray:
    """Per-channel affine map: (x - mu) / sigma * gamma + beta."""
    x = _require_feature_map(x)
    if x.shape[1] != bn.channels:
        raise ShapeError("channel", f"input has {x.shape[1]} channels, bn expects {bn.channels}")
    _record(x.size)
    scale, shift = bn_scale_shift(bn)
    out = x * scale.astype(np.float32)[None, :, None, None]
    out += shift.astype(np.float32)[None, :, None, None]
    return _check_finite(out, "batchnorm output")


def batchnorm_cols(x: np.ndarray, bn: BnSpec) -> np.ndarray:
    """Batch-norm over the columns of a [rows, channels] matrix."""
    x = _require_matrix(x, "batchnorm input")
    if x.shape[1] != bn.channels:
        raise ShapeError("channel", f"input has {x.shape[1]} columns, bn expects {bn.channels}")
    _record(x.size)
    scale, shift = bn_scale_shift(bn)
    out = x * scale.astype(np.float32)[None, :] + shift.astype(np.float32)[None, :]
    return _check_finite(out, "batchnorm output")


def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Row-major matrix product plus broadcast bias: x [rows, in] @ w [in, out].

    Weights may be passed pre-upcast to float64 (the blocks cache them that
    way); float32 weights are upcast here.
    """
    x = _require_matrix(x, "linear input")
    w64 = np.asarray(w, dtype=np.float64)
    if w64.ndim != 2:
        raise ShapeError("rank", f"linear weight must be rank 2, got rank {w64.ndim}")
    if x.shape[1] != w64.shape[0]:
        raise ShapeError("inner", f"x has {x.shape[1]} columns, w has {w64.shape[0]} rows")
    _record(x.shape[0] * x.shape[1] * w64.shape[1])
    out = x.astype(np.float64) @ w64
    if b is not None:
        b64 = np.asarray(b, dtype=np.float64)
        if b64.shape != (w64.shape[1],):
            raise ShapeError("bias", f"expected ({w64.shape[1]},), got {b64.shape}")
        out += b64[None, :]
    return _check_finite(out.astype(np.float32), "linear output")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Counted (possibly batched) matrix product with float64 accumulation."""
    a64 = np.asarray(a, dtype=np.float64)
    b64 = np.asarray(b, dtype=np.float64)
    if a64.shape[-1] != b64.shape[-2]:
        raise ShapeError("inner", f"{a64.shape} @ {b64.shape}")
    batch = int(np.prod(np.broadcast_shapes(a64.shape[:-2], b64.shape[:-2]), initial=1))
    _record(batch * a64.shape[-2] * a64.shape[-1] * b64.shape[-1])
    out = (a64 @ b64).astype(np.float32)
    return _check_finite(out, "matmul output")


_INV_SQRT2 = 0.70710678118654752440
_ERF_SPLIT_MIN = 16384
_erf_pool = ThreadPoolExecutor(max_workers=1)  # worker spawns on first use


def _erf_inplace(a: np.ndarray) -> None:
    # erf is the engine's costliest transcendental (scalar cephes, unlike
    # numpy's SIMD exp); large buffers are split across a worker thread.
    # Elementwise on disjoint halves, so results are bit-identical.
    if a.size >= _ERF_SPLIT_MIN and a.flags.c_contiguous:
        flat = a.reshape(-1)
        half = flat.size // 2
        pending = _erf_pool.submit(erf, flat[:half], flat[:half])
        erf(flat[half:], out=flat[half:])
        pending.result()
    else:
        erf(a, out=a)


def _gelu64(x64: np.ndarray) -> np.ndarray:
    """GELU on a float64 array, returned in float64 (input untouched)."""
    out = x64 * _INV_SQRT2
    _erf_inplace(out)
    out += 1.0
    out *= x64
    out *= 0.5
    return out


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact Gaussian-error linear unit: 0.5 * x * (1 + erf(x / sqrt(2)))."""
    x = _as_f32(x)
    out = _gelu64(x.astype(np.float64))
    return _check_finite(out.astype(np.float32), "gelu output")


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max-subtraction; rows sum to 1."""
    x = _check_finite(_as_f32(x), "softmax input")
    x64 = x.astype(np.float64)
    x64 -= x64.max(axis=-1, keepdims=True)
    np.exp(x64, out=x64)
    x64 /= x64.sum(axis=-1, keepdims=True)
    return _check_finite(x64.astype(np.float32), "softmax output")


def avgpool_global(x: np.ndarray) -> np.ndarray:
    """Mean over the spatial extents: [b, c, h, w] -> [b, c]."""
    x = _require_feature_map(x)
    if x.shape[2] == 0 or x.shape[3] == 0:
        raise ShapeError("spatial", "pooling requires positive spatial extents")
    out = x.astype(np.float64).mean(axis=(2, 3)).astype(np.float32)
    return _check_finite(out, "avgpool output")

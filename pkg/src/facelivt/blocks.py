"""The four block kinds and the residual block wrapper.

Token mixers exchange information across spatial positions: RepMix with
depthwise convolution branches, MHSA with softmax attention, MHLA with a
per-head token-dimension MLP. The channel mixer is the per-position MLP.

A RepMix block carries its own residual, so the residual wrapper in
``block_forward`` adds one only around the attention mixers. RepMix blocks
may be in the train form (k x k branch + 1 x 1 branch + batch norm, residual
at runtime) or in a deploy form where some or all of those components have
been folded into the k x k convolution; ``FORM_TRAIN``/``FORM_DEPLOY`` tag
which side of the reparameterization a block sits on.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

from .ops import (
    BnSpec,
    ConvSpec,
    ShapeError,
    _check_finite,
    _gelu64,
    _record,
    _require_feature_map,
    _require_matrix,
    batchnorm,
    batchnorm_cols,
    conv2d,
    gelu,
    linear,
    matmul,
    softmax_rows,
)

FORM_TRAIN = "train"
FORM_DEPLOY = "deploy"


class FormError(ValueError):
    """A block was used in (or built with) the wrong train/deploy form."""


def _freeze_mat(a: np.ndarray, what: str, shape: tuple[int, ...]) -> np.ndarray:
    out = np.ascontiguousarray(np.asarray(a, dtype=np.float32))
    if out.shape != shape:
        raise ShapeError(what, f"expected shape {shape}, got {out.shape}")
    out.flags.writeable = False
    return out


def _cache64(obj, *names: str) -> None:
    # Frozen float64 copies so hot paths skip the per-call upcast.
    for name in names:
        value = getattr(obj, name)
        if value is None:
            continue
        copy = value.astype(np.float64)
        copy.flags.writeable = False
        object.__setattr__(obj, f"_{name}64", copy)


# ---------------------------------------------------------------------------
# RepMix
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RepMixBlock:
    """Reparameterizable convolution mixer.

    Train form: ``conv_kxk`` and ``conv_1x1`` branches summed, batch norm on
    the sum, plus a runtime residual at stride 1. Deploy form: any of the
    1x1 branch, the batch norm and the residual may have been folded into
    ``conv_kxk``; ``residual_folded`` marks the residual as absorbed.
    Within-stage mixers are depthwise; stride-2 downsamplers use the same
    block with dense branches and no residual.
    """

    conv_kxk: ConvSpec
    conv_1x1: ConvSpec | None
    bn: BnSpec | None
    stride: int
    form: str = FORM_TRAIN
    residual_folded: bool = False

    def __post_init__(self):
        k = self.conv_kxk
        if k.stride != self.stride:
            raise ShapeError("stride", f"kxk stride {k.stride} != block stride {self.stride}")
        if self.conv_1x1 is not None:
            o = self.conv_1x1
            if o.kernel_size != 1 or o.padding != 0:
                raise ShapeError("kernel", "secondary branch must be 1x1 with no padding")
            if (o.in_channels, o.out_channels, o.groups) != (
                k.in_channels,
                k.out_channels,
                k.groups,
            ):
                raise ShapeError("channel", "branches must share channel counts and grouping")
            if o.stride != self.stride:
                raise ShapeError("stride", "branches must share the stride")
        if self.bn is not None and self.bn.channels != k.out_channels:
            raise ShapeError("channel", "bn width must match the branch output channels")
        if self.form == FORM_TRAIN:
            if self.conv_1x1 is None or self.bn is None or self.residual_folded:
                raise FormError("train form requires both branches, bn, and a live residual")
        elif self.form != FORM_DEPLOY:
            raise FormError(f"unknown form {self.form!r}")
        if self.has_residual_path and k.in_channels != k.out_channels:
            raise ShapeError("channel", "stride-1 residual requires equal in/out channels")

    @property
    def has_residual_path(self) -> bool:
        # Stride-2 blocks downsample and never carry the structural residual.
        return self.stride == 1

    @property
    def param_count(self) -> int:
        n = self.conv_kxk.param_count
        if self.conv_1x1 is not None:
            n += self.conv_1x1.param_count
        if self.bn is not None:
            n += self.bn.param_count
        return n


def repmix_forward(block: RepMixBlock, x: np.ndarray) -> np.ndarray:
    x = _require_feature_map(x)
    y = conv2d(x, block.conv_kxk)
    if block.conv_1x1 is not None:
        y = y + conv2d(x, block.conv_1x1)
    if block.bn is not None:
        y = batchnorm(y, block.bn)
    if block.has_residual_path and not block.residual_folded:
        y = y + x
    return y


# ---------------------------------------------------------------------------
# MHSA
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class MhsaBlock:
    """Multi-head self-attention over a token matrix, no projection biases."""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    heads: int

    def __post_init__(self):
        c = np.asarray(self.wq).shape[0]
        for name in ("wq", "wk", "wv", "wo"):
            object.__setattr__(self, name, _freeze_mat(getattr(self, name), name, (c, c)))
        if self.heads < 1 or c % self.heads != 0:
            raise ShapeError("heads", f"{c} channels not divisible by {self.heads} heads")
        _cache64(self, "wq", "wk", "wv", "wo")

    @property
    def channels(self) -> int:
        return self.wq.shape[0]

    @property
    def head_dim(self) -> int:
        return self.channels // self.heads

    @property
    def param_count(self) -> int:
        return 4 * self.channels * self.channels


def _split_heads(m: np.ndarray, heads: int) -> np.ndarray:
    n, c = m.shape
    return m.reshape(n, heads, c // heads).transpose(1, 0, 2)  # [heads, n, head_dim]


def mhsa_attention(block: MhsaBlock, x: np.ndarray) -> np.ndarray:
    """Per-head attention weights [heads, N, N]; each row sums to 1."""
    x = _require_matrix(x, "token matrix")
    if x.shape[0] == 0:
        raise ShapeError("tokens", "attention over zero tokens is undefined")
    if x.shape[1] != block.channels:
        raise ShapeError("channel", f"tokens have {x.shape[1]} channels, block expects {block.channels}")
    q = _split_heads(linear(x, block._wq64), block.heads)
    k = _split_heads(linear(x, block._wk64), block.heads)
    # Logits scale by the per-head dimension.
    logits = matmul(q, k.transpose(0, 2, 1)) / np.float32(np.sqrt(block.head_dim))
    return softmax_rows(logits)


def mhsa_forward(block: MhsaBlock, x: np.ndarray) -> np.ndarray:
    attn = mhsa_attention(block, x)
    v = _split_heads(linear(x, block._wv64), block.heads)
    mixed = matmul(attn, v)  # [heads, n, head_dim]
    n = x.shape[0]
    concat = mixed.transpose(1, 0, 2).reshape(n, block.channels)
    return linear(concat, block._wo64)


# ---------------------------------------------------------------------------
# MHLA
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class MhlaBlock:
    """Multi-head linear attention: a per-head two-layer MLP along tokens.

    The channel axis is split into ``heads`` slices; inside a head, each
    channel's length-N token vector runs through w_in [N, N*r], the
    activation, and w_out [N*r, N]. Weights bind the block to one spatial
    resolution (``token_count``).
    """

    heads: int
    token_count: int
    expansion: int
    w_in: np.ndarray  # [heads, N, N*r]
    w_out: np.ndarray  # [heads, N*r, N]

    def __post_init__(self):
        n, r = self.token_count, self.expansion
        if self.heads < 1 or n < 1 or r < 0:
            raise ShapeError("config", "heads and token count must be positive")
        object.__setattr__(self, "w_in", _freeze_mat(self.w_in, "w_in", (self.heads, n, n * r)))
        object.__setattr__(self, "w_out", _freeze_mat(self.w_out, "w_out", (self.heads, n * r, n)))
        _cache64(self, "w_in", "w_out")

    @property
    def param_count(self) -> int:
        return self.w_in.size + self.w_out.size


def mhla_forward(
    block: MhlaBlock,
    x: np.ndarray,
    activation: Callable[[np.ndarray], np.ndarray] = gelu,
) -> np.ndarray:
    """Mix tokens within each head slice; ``activation`` is a test hook.

    The default path evaluates the whole per-head expression in float64 and
    rounds once at the op boundary; a custom ``activation`` sees float32
    intermediates via the composed primitives instead.
    """
    x = _require_matrix(x, "token matrix")
    n, c = x.shape
    if n != block.token_count:
        raise ShapeError(
            "tokens", f"block weights bind {block.token_count} tokens, input has {n}"
        )
    if c % block.heads != 0:
        raise ShapeError("channel", f"{c} channels not divisible by {block.heads} heads")
    per_head = c // block.heads
    # [heads, per_head, n]: rows are channel token-vectors within one head.
    if activation is gelu:
        rows64 = x.T.astype(np.float64).reshape(block.heads, per_head, n)
        nr = n * block.expansion
        _record(2 * c * n * nr)
        mixed = _gelu64(rows64 @ block._w_in64) @ block._w_out64
        out = mixed.reshape(c, n).T.astype(np.float32)
        return _check_finite(out, "mhla output")
    rows = x.T.reshape(block.heads, per_head, n)
    hidden = activation(matmul(rows, block._w_in64))
    mixed = matmul(hidden, block._w_out64)  # [heads, per_head, n]
    return np.ascontiguousarray(mixed.reshape(c, n).T)


# ---------------------------------------------------------------------------
# Channel mixer
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class MlpBlock:
    """Per-position channel MLP: expand, activation, reduce.

    Train form normalizes after each matrix (``bn_inner``/``bn_outer``);
    the deploy form carries the batch norms folded into the matrices plus
    explicit biases (``b_expand``/``b_reduce``).
    """

    w_expand: np.ndarray  # [c, r*c]
    w_reduce: np.ndarray  # [r*c, c]
    bn_inner: BnSpec | None
    bn_outer: BnSpec | None
    b_expand: np.ndarray | None = None
    b_reduce: np.ndarray | None = None
    expansion: int = 3
    form: str = FORM_TRAIN

    def __post_init__(self):
        c = np.asarray(self.w_expand).shape[0]
        rc = c * self.expansion
        object.__setattr__(self, "w_expand", _freeze_mat(self.w_expand, "w_expand", (c, rc)))
        object.__setattr__(self, "w_reduce", _freeze_mat(self.w_reduce, "w_reduce", (rc, c)))
        if self.expansion < 1:
            raise ShapeError("expansion", "expansion ratio must be >= 1")
        if self.form == FORM_TRAIN:
            if self.bn_inner is None or self.bn_outer is None:
                raise FormError("train form requires both batch norms")
            if self.b_expand is not None or self.b_reduce is not None:
                raise FormError("train form carries no explicit biases")
        elif self.form == FORM_DEPLOY:
            if self.bn_inner is not None or self.bn_outer is not None:
                raise FormError("deploy form has the batch norms folded away")
            if self.b_expand is None or self.b_reduce is None:
                raise FormError("deploy form requires explicit biases")
            object.__setattr__(self, "b_expand", _freeze_mat(self.b_expand, "b_expand", (rc,)))
            object.__setattr__(self, "b_reduce", _freeze_mat(self.b_reduce, "b_reduce", (c,)))
        else:
            raise FormError(f"unknown form {self.form!r}")
        if self.bn_inner is not None and self.bn_inner.channels != rc:
            raise ShapeError("channel", "inner bn width must be r*c")
        if self.bn_outer is not None and self.bn_outer.channels != c:
            raise ShapeError("channel", "outer bn width must be c")
        _cache64(self, "w_expand", "w_reduce", "b_expand", "b_reduce")

    @property
    def channels(self) -> int:
        return self.w_expand.shape[0]

    @property
    def param_count(self) -> int:
        n = self.w_expand.size + self.w_reduce.size
        for bn in (self.bn_inner, self.bn_outer):
            if bn is not None:
                n += bn.param_count
        for b in (self.b_expand, self.b_reduce):
            if b is not None:
                n += b.size
        return n


def mlp_rows(block: MlpBlock, rows: np.ndarray) -> np.ndarray:
    """Channel MLP over a [rows, channels] matrix (one row per position)."""
    rows = _require_matrix(rows, "mlp input")
    if rows.shape[1] != block.channels:
        raise ShapeError("channel", f"input has {rows.shape[1]} channels, block expects {block.channels}")
    if block.form == FORM_TRAIN:
        hidden = batchnorm_cols(linear(rows, block._w_expand64), block.bn_inner)
        return batchnorm_cols(linear(gelu(hidden), block._w_reduce64), block.bn_outer)
    hidden = linear(rows, block._w_expand64, block._b_expand64)
    return linear(gelu(hidden), block._w_reduce64, block._b_reduce64)


def mlp_forward(block: MlpBlock, x: np.ndarray) -> np.ndarray:
    """Apply the channel MLP at every spatial position of a feature map."""
    x = _require_feature_map(x)
    b, c, h, w = x.shape
    rows = tokens_from_map(x)
    out = mlp_rows(block, rows)
    return map_from_tokens(out, b, h, w)


# ---------------------------------------------------------------------------
# Residual wrapper
# ---------------------------------------------------------------------------

TokenMixer = Union[RepMixBlock, MhsaBlock, MhlaBlock]


def tokens_from_map(x: np.ndarray) -> np.ndarray:
    """[b, c, h, w] -> [b*h*w, c]; positions flatten row-major over (h, w)."""
    b, c, h, w = x.shape
    return np.ascontiguousarray(x.reshape(b, c, h * w).transpose(0, 2, 1).reshape(b * h * w, c))


def map_from_tokens(rows: np.ndarray, b: int, h: int, w: int) -> np.ndarray:
    c = rows.shape[1]
    return np.ascontiguousarray(rows.reshape(b, h * w, c).transpose(0, 2, 1).reshape(b, c, h, w))


def block_forward(mixer: TokenMixer, channel_mixer: MlpBlock, x: np.ndarray) -> np.ndarray:
    """One residual block: token mixing then channel mixing.

    Attention mixers see the feature map flattened to h*w tokens per batch
    item and get an explicit residual; RepMix embeds its own.
    """
    x = _require_feature_map(x)
    if isinstance(mixer, RepMixBlock):
        mixed = repmix_forward(mixer, x)
    else:
        b, c, h, w = x.shape
        out_rows = []
        for i in range(b):
            tokens = tokens_from_map(x[i : i + 1])
            if isinstance(mixer, MhsaBlock):
                out_rows.append(mhsa_forward(mixer, tokens))
            else:
                out_rows.append(mhla_forward(mixer, tokens))
        mixed = x + map_from_tokens(np.concatenate(out_rows, axis=0), b, h, w)
    return mixed + mlp_forward(channel_mixer, mixed)

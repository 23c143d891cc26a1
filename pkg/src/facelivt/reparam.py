"""Structural reparameterization: collapse training topology into deploy form.

Three independent, individually exact folds:

* batch norm into a preceding convolution (scale into the weights, the
  rest into the bias);
* the 1x1 branch into the spatial center of the k x k kernel;
* the stride-1 residual as a +1 center tap on each channel's own kernel.

Applied to a whole model, every RepMix block, channel MLP and stem layer
collapses; attention blocks contain no foldable structure and pass through
untouched. Each fold can be switched off to produce partially fused deploy
forms; folding the residual requires the batch norm to be folded first,
since x + bn(conv(x)) is not expressible as a single convolution while the
norm still sits outside.

All folds are exact in exact arithmetic; the only train/deploy deviation
comes from rounding the folded parameters to float32.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .blocks import FORM_DEPLOY, FORM_TRAIN, FormError, MlpBlock, RepMixBlock
from .ops import BnSpec, ConvSpec, ShapeError, bn_scale_shift


@dataclass(frozen=True)
class FusionOptions:
    """Which folds to apply; mirrors the CLI toggles."""

    fuse_bn: bool = True
    fold_residual: bool = True
    merge_1x1: bool = True

    @property
    def any_enabled(self) -> bool:
        return self.fuse_bn or self.fold_residual or self.merge_1x1


@dataclass(frozen=True)
class FusionReport:
    """Evidence that fusion preserved the function."""

    max_abs_error: float
    probe_count: int
    blocks_fused: int
    params_before: int
    params_after: int

    def __post_init__(self):
        if self.max_abs_error < 0:
            raise ValueError("max_abs_error must be non-negative")
        if self.params_after > self.params_before:
            raise ValueError("fusion must not add parameters")

    def render(self) -> str:
        saved = self.params_before - self.params_after
        pct = 100.0 * saved / self.params_before if self.params_before else 0.0
        return "\n".join(
            [
                f"blocks fused:      {self.blocks_fused}",
                f"params before:     {self.params_before}",
                f"params after:      {self.params_after}  (-{saved}, -{pct:.2f}%)",
                f"probe inputs:      {self.probe_count}",
                f"max abs deviation: {self.max_abs_error:.3e}",
            ]
        )


def fuse_bn_into_conv(conv: ConvSpec, bn: BnSpec) -> ConvSpec:
    """Fold an inference-time batch norm into the convolution before it.

    W'[o] = W[o] * gamma[o] / sigma[o]
    b'[o] = (b[o] - mu[o]) * gamma[o] / sigma[o] + beta[o]
    """
    if bn.channels != conv.out_channels:
        raise ShapeError(
            "channel", f"bn has {bn.channels} channels, conv outputs {conv.out_channels}"
        )
    scale, _ = bn_scale_shift(bn)
    w = conv.weight.astype(np.float64) * scale[:, None, None, None]
    b = (conv.bias.astype(np.float64) - bn.mu.astype(np.float64)) * scale + bn.beta.astype(
        np.float64
    )
    return ConvSpec(
        weight=w.astype(np.float32),
        bias=b.astype(np.float32),
        stride=conv.stride,
        padding=conv.padding,
        groups=conv.groups,
    )


def _scale_only(bn: BnSpec) -> BnSpec:
    """The multiplicative part of a batch norm (mean and shift stripped)."""
    zero = np.zeros(bn.channels, dtype=np.float32)
    return BnSpec(gamma=bn.gamma, beta=zero, mu=zero, sigma=bn.sigma, eps=bn.eps)


def merge_conv_branches(kxk: ConvSpec, one: ConvSpec | None, add_identity: bool) -> ConvSpec:
    """Add a 1x1 branch and/or the identity into the center of a k x k kernel.

    Exactness requires the k x k branch to use same-padding ((k-1)/2), so
    that the center tap of the kernel sees the stride-aligned input pixel
    that the 1x1 branch (padding 0) and the residual see.
    """
    k = kxk.kernel_size
    if kxk.padding != (k - 1) // 2:
        raise ShapeError("padding", f"kernel {k} needs same-padding {(k - 1) // 2} to merge")
    if add_identity:
        if k % 2 == 0:
            raise ShapeError("kernel", "identity folding needs an odd kernel center")
        if kxk.stride != 1:
            raise ShapeError("stride", "identity folding is undefined for stride > 1")
        if kxk.in_channels != kxk.out_channels:
            raise ShapeError("channel", "identity folding requires equal in/out channels")
    w = kxk.weight.astype(np.float64)
    b = kxk.bias.astype(np.float64)
    center = k // 2
    if one is not None:
        if one.kernel_size != 1 or one.padding != 0:
            raise ShapeError("kernel", "secondary branch must be 1x1 with no padding")
        if (one.out_channels, one.in_per_group, one.groups, one.stride) != (
            kxk.out_channels,
            kxk.in_per_group,
            kxk.groups,
            kxk.stride,
        ):
            raise ShapeError("channel", "branches must agree in channels, groups, and stride")
        w[:, :, center, center] += one.weight.astype(np.float64)[:, :, 0, 0]
        b = b + one.bias.astype(np.float64)
    if add_identity:
        if kxk.in_per_group == 1:
            w[:, 0, center, center] += 1.0
        else:
            opg = kxk.out_channels // kxk.groups
            for o in range(kxk.out_channels):
                w[o, o % opg, center, center] += 1.0
    return ConvSpec(
        weight=w.astype(np.float32),
        bias=b.astype(np.float32),
        stride=kxk.stride,
        padding=kxk.padding,
        groups=kxk.groups,
    )


def merge_dw_branches(kxk: ConvSpec, one: ConvSpec, add_identity: bool) -> ConvSpec:
    """Depthwise-only wrapper around :func:`merge_conv_branches`."""
    if not kxk.is_depthwise or not one.is_depthwise:
        raise ShapeError("groups", "both branches must be depthwise")
    return merge_conv_branches(kxk, one, add_identity)


def reparameterize_repmix(
    block: RepMixBlock, options: FusionOptions = FusionOptions()
) -> RepMixBlock:
    """Collapse a train-form RepMix block into its deploy form.

    Fold order mirrors the block algebra: the norm's scale distributes over
    the branch sum (full fold into the k x k branch, scale-only into the
    1x1 branch so mean and shift enter exactly once), then the branches
    merge, then the residual joins as a center tap.
    """
    if block.form != FORM_TRAIN:
        raise FormError("block is already in deploy form")
    kxk, one, bn = block.conv_kxk, block.conv_1x1, block.bn
    if options.fuse_bn:
        kxk = fuse_bn_into_conv(kxk, bn)
        one = fuse_bn_into_conv(one, _scale_only(bn))
        bn = None
    if options.merge_1x1:
        kxk = merge_conv_branches(kxk, one, add_identity=False)
        one = None
    fold_residual = (
        options.fold_residual and options.fuse_bn and block.has_residual_path
    )
    if fold_residual:
        kxk = merge_conv_branches(kxk, None, add_identity=True)
    return RepMixBlock(
        conv_kxk=kxk,
        conv_1x1=one,
        bn=bn,
        stride=block.stride,
        form=FORM_DEPLOY,
        residual_folded=fold_residual,
    )


def fuse_mlp_bn(block: MlpBlock) -> MlpBlock:
    """Fold both batch norms of a channel MLP into the adjacent matrices."""
    if block.form != FORM_TRAIN:
        raise FormError("mlp is already in deploy form")
    s_in, t_in = bn_scale_shift(block.bn_inner)
    s_out, t_out = bn_scale_shift(block.bn_outer)
    w_expand = block.w_expand.astype(np.float64) * s_in[None, :]
    w_reduce = block.w_reduce.astype(np.float64) * s_out[None, :]
    return MlpBlock(
        w_expand=w_expand.astype(np.float32),
        w_reduce=w_reduce.astype(np.float32),
        bn_inner=None,
        bn_outer=None,
        b_expand=t_in.astype(np.float32),
        b_reduce=t_out.astype(np.float32),
        expansion=block.expansion,
        form=FORM_DEPLOY,
    )


def reparameterize_model(model, options: FusionOptions = FusionOptions(), probes: int = 5,
                         probe_seed: int = 0):
    """Fuse every foldable component of a train-form model.

    Returns the deploy-form model and a :class:`FusionReport` measuring the
    worst embedding deviation over ``probes`` random inputs drawn uniform
    in [-1, 1] (the input normalization the models assume).

    Implemented in :mod:`facelivt.model` to avoid a circular import; this
    thin alias keeps the fusion API in one namespace.
    """
    from .model import reparameterize_model as _impl

    return _impl(model, options=options, probes=probes, probe_seed=probe_seed)

import numpy as np
import pytest

from facelivt import (
    BnSpec,
    Block,
    ConvSpec,
    MhlaBlock,
    MhsaBlock,
    MlpBlock,
    Model,
    ModelConfig,
    RepMixBlock,
    StemLayer,
)


def rng(seed: int = 0) -> np.random.Generator:
    return np.random.default_rng(seed)


def random_conv(generator, out_ch, in_per_group, k, stride=1, padding=None, groups=1, scale=0.5):
    if padding is None:
        padding = (k - 1) // 2
    return ConvSpec(
        weight=(scale * generator.uniform(-1, 1, (out_ch, in_per_group, k, k))).astype(np.float32),
        bias=(scale * generator.uniform(-1, 1, out_ch)).astype(np.float32),
        stride=stride,
        padding=padding,
        groups=groups,
    )


def random_depthwise(generator, channels, k=3, stride=1):
    return random_conv(generator, channels, 1, k, stride=stride, groups=channels)


def random_bn(generator, channels):
    return BnSpec(
        gamma=(1.0 + 0.3 * generator.uniform(-1, 1, channels)).astype(np.float32),
        beta=(0.2 * generator.uniform(-1, 1, channels)).astype(np.float32),
        mu=(0.2 * generator.uniform(-1, 1, channels)).astype(np.float32),
        sigma=(1.0 + 0.2 * generator.uniform(-1, 1, channels)).astype(np.float32),
    )


def random_repmix(generator, channels, stride=1, dense=False, out_channels=None):
    out_channels = out_channels or channels
    groups = 1 if dense else channels
    in_per_group = channels if dense else 1
    return RepMixBlock(
        conv_kxk=random_conv(generator, out_channels, in_per_group, 3, stride=stride, groups=groups),
        conv_1x1=random_conv(generator, out_channels, in_per_group, 1, stride=stride, padding=0, groups=groups),
        bn=random_bn(generator, out_channels),
        stride=stride,
    )


def random_mlp(generator, channels, expansion=3):
    hidden = channels * expansion
    return MlpBlock(
        w_expand=(0.5 * generator.uniform(-1, 1, (channels, hidden))).astype(np.float32),
        w_reduce=(0.5 * generator.uniform(-1, 1, (hidden, channels))).astype(np.float32),
        bn_inner=random_bn(generator, hidden),
        bn_outer=random_bn(generator, channels),
        expansion=expansion,
    )


def random_mhsa(generator, channels, heads):
    def mat():
        return (generator.uniform(-1, 1, (channels, channels)) / np.sqrt(channels)).astype(
            np.float32
        )

    return MhsaBlock(wq=mat(), wk=mat(), wv=mat(), wo=mat(), heads=heads)


def random_mhla(generator, heads, tokens, expansion=2):
    return MhlaBlock(
        heads=heads,
        token_count=tokens,
        expansion=expansion,
        w_in=(generator.uniform(-1, 1, (heads, tokens, tokens * expansion)) / np.sqrt(tokens)).astype(np.float32),
        w_out=(
            generator.uniform(-1, 1, (heads, tokens * expansion, tokens)) / np.sqrt(tokens * expansion)
        ).astype(np.float32),
    )


@pytest.fixture(scope="session")
def tiny_config() -> ModelConfig:
    return ModelConfig(variant="tiny", stage_dims=(8, 16, 16, 32), heads=4)


def identity_bn(channels):
    return BnSpec.identity(channels)


def identity_model(config: ModelConfig) -> Model:
    """A model whose every component is an exact identity or annihilator."""

    def zero_conv(out_ch, in_per_group, k, stride, padding, groups):
        return ConvSpec(
            weight=np.zeros((out_ch, in_per_group, k, k), np.float32),
            bias=np.zeros(out_ch, np.float32),
            stride=stride,
            padding=padding,
            groups=groups,
        )

    def zero_repmix(in_ch, out_ch, stride, dense):
        groups = 1 if dense else in_ch
        cpg = in_ch if dense else 1
        return RepMixBlock(
            conv_kxk=zero_conv(out_ch, cpg, 3, stride, 1, groups),
            conv_1x1=zero_conv(out_ch, cpg, 1, stride, 0, groups),
            bn=identity_bn(out_ch),
            stride=stride,
        )

    def zero_mlp(c, r):
        return MlpBlock(
            w_expand=np.zeros((c, r * c), np.float32),
            w_reduce=np.zeros((r * c, c), np.float32),
            bn_inner=identity_bn(r * c),
            bn_outer=identity_bn(c),
            expansion=r,
        )

    def zero_mixer(stage):
        kind = config.stage_mixers[stage]
        c = config.stage_dims[stage]
        if kind == "repmix":
            return zero_repmix(c, c, 1, dense=False)
        if kind == "mhsa":
            zeros = np.zeros((c, c), np.float32)
            return MhsaBlock(wq=zeros, wk=zeros, wv=zeros, wo=zeros, heads=config.heads)
        n, r = config.token_count(stage), config.mhla_expansion
        return MhlaBlock(
            heads=config.heads,
            token_count=n,
            expansion=r,
            w_in=np.zeros((config.heads, n, n * r), np.float32),
            w_out=np.zeros((config.heads, n * r, n), np.float32),
        )

    stem = tuple(
        StemLayer(conv=zero_conv(config.stem_dim, in_ch, 3, 2, 1, 1), bn=identity_bn(config.stem_dim))
        for in_ch in (3, config.stem_dim)
    )
    stages = tuple(
        tuple(
            Block(mixer=zero_mixer(stage), channel_mixer=zero_mlp(config.stage_dims[stage], config.mlp_expansion))
            for _ in range(config.stage_blocks[stage])
        )
        for stage in range(4)
    )
    downsamplers = tuple(
        zero_repmix(config.stage_dims[i], config.stage_dims[i + 1], 2, dense=True) for i in range(3)
    )
    return Model(
        config=config,
        stem=stem,
        stages=stages,
        downsamplers=downsamplers,
        head_weight=np.zeros((config.stage_dims[-1], config.embed_dim), np.float32),
        head_bias=np.zeros(config.embed_dim, np.float32),
    )

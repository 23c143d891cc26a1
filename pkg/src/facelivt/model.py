"""Network builder, forward pass, and the parameter/FLOP cost model.

A model is a stem (two stride-2 3x3 convolutions with batch norm and GELU),
four stages of residual blocks joined by stride-2 downsamplers, and a
global-average-pool + fully-connected head emitting an unnormalized
embedding. Within-stage RepMix blocks are depthwise; the downsamplers are
dense reparameterizable blocks of the same shape (3x3 + 1x1 branches, one
batch norm, no residual) since a depthwise kernel cannot change the channel
count.

Cost accounting: FLOP totals are multiply-accumulate counts, the unit the
reference cost tables for these backbones are quoted in. Pure adds,
activations, softmax, and pooling count zero; an unfused batch norm counts
one MAC per element (its scale-and-shift). The analytic model and the
instrumented counter in :mod:`facelivt.ops` share this convention exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .blocks import (
    FORM_DEPLOY,
    FORM_TRAIN,
    FormError,
    MhlaBlock,
    MhsaBlock,
    MlpBlock,
    RepMixBlock,
    block_forward,
    repmix_forward,
)
from .config import MIXER_MHLA, MIXER_MHSA, MIXER_REPMIX, STAGE_COUNT, ModelConfig
from .ops import BnSpec, ConvSpec, ShapeError, avgpool_global, batchnorm, conv2d, count_macs, gelu, linear
from .reparam import FusionOptions, FusionReport, fuse_bn_into_conv, fuse_mlp_bn, reparameterize_repmix


@dataclass(frozen=True, eq=False)
class StemLayer:
    conv: ConvSpec
    bn: BnSpec | None

    @property
    def param_count(self) -> int:
        return self.conv.param_count + (self.bn.param_count if self.bn is not None else 0)


@dataclass(frozen=True, eq=False)
class Block:
    mixer: RepMixBlock | MhsaBlock | MhlaBlock
    channel_mixer: MlpBlock


@dataclass(frozen=True, eq=False)
class Model:
    config: ModelConfig
    stem: tuple[StemLayer, StemLayer]
    stages: tuple[tuple[Block, ...], ...]
    downsamplers: tuple[RepMixBlock, ...]
    head_weight: np.ndarray
    head_bias: np.ndarray
    form: str = FORM_TRAIN

    def __post_init__(self):
        for name in ("head_weight", "head_bias"):
            canon = np.ascontiguousarray(np.asarray(getattr(self, name), dtype=np.float32))
            canon.flags.writeable = False
            object.__setattr__(self, name, canon)
            cache = canon.astype(np.float64)
            cache.flags.writeable = False
            object.__setattr__(self, f"_{name}64", cache)


# ---------------------------------------------------------------------------
# Complexity formulas
# ---------------------------------------------------------------------------


def mhla_complexity(n: int, c: int, r: int) -> int:
    """MACs of one linear-attention block: 2 * N * (N*r) * C."""
    if n < 0 or c < 0 or r < 0:
        raise ValueError("complexity arguments must be non-negative")
    return 2 * n * (n * r) * c


def mhsa_complexity(n: int, c: int) -> int:
    """MACs of one softmax-attention block: 4*N*C^2 + 2*N^2*C."""
    if n < 0 or c < 0:
        raise ValueError("complexity arguments must be non-negative")
    return 4 * n * c * c + 2 * n * n * c


# ---------------------------------------------------------------------------
# Builder
# ---------------------------------------------------------------------------


def _uniform(rng: np.random.Generator, shape, fan_in: int, gain: float = 1.0) -> np.ndarray:
    return (gain * rng.uniform(-1.0, 1.0, size=shape) / np.sqrt(fan_in)).astype(np.float32)


def _init_conv(rng, out_ch, in_per_group, k, stride, padding, groups, gain=1.0) -> ConvSpec:
    fan_in = in_per_group * k * k
    return ConvSpec(
        weight=_uniform(rng, (out_ch, in_per_group, k, k), fan_in, gain),
        bias=_uniform(rng, (out_ch,), fan_in, gain),
        stride=stride,
        padding=padding,
        groups=groups,
    )


def _init_bn(rng, channels: int, eps: float, gamma: float = 1.0) -> BnSpec:
    # Non-identity statistics of unit scale: fusion tests stay meaningful
    # while activations neither blow up nor collapse. Residual-branch norms
    # take gamma < 1 so the stream keeps roughly unit variance with depth.
    return BnSpec(
        gamma=(gamma * (1.0 + 0.2 * rng.uniform(-1.0, 1.0, channels))).astype(np.float32),
        beta=(0.05 * rng.uniform(-1.0, 1.0, channels)).astype(np.float32),
        mu=(0.05 * rng.uniform(-1.0, 1.0, channels)).astype(np.float32),
        sigma=(1.0 + 0.1 * rng.uniform(-1.0, 1.0, channels)).astype(np.float32),
        eps=eps,
    )


def _init_repmix(rng, in_ch, out_ch, k, stride, depthwise, eps, bn_gamma=1.0) -> RepMixBlock:
    groups = in_ch if depthwise else 1
    in_per_group = 1 if depthwise else in_ch
    return RepMixBlock(
        conv_kxk=_init_conv(rng, out_ch, in_per_group, k, stride, (k - 1) // 2, groups),
        conv_1x1=_init_conv(rng, out_ch, in_per_group, 1, stride, 0, groups),
        bn=_init_bn(rng, out_ch, eps, gamma=bn_gamma),
        stride=stride,
    )


def _init_mlp(rng, channels, expansion, eps) -> MlpBlock:
    hidden = channels * expansion
    return MlpBlock(
        w_expand=_uniform(rng, (channels, hidden), channels),
        bn_inner=_init_bn(rng, hidden, eps),
        w_reduce=_uniform(rng, (hidden, channels), hidden),
        bn_outer=_init_bn(rng, channels, eps, gamma=_BRANCH_GAIN),
        expansion=expansion,
    )


# Residual-branch outputs are damped so ~14 stacked blocks keep the stream
# near unit variance; large activations would otherwise drift the GELU/erf
# inputs across precision and timing regimes.
_BRANCH_GAIN = 0.4


def _init_mixer(rng, config: ModelConfig, stage: int):
    kind = config.stage_mixers[stage]
    c = config.stage_dims[stage]
    if kind == MIXER_REPMIX:
        return _init_repmix(rng, c, c, 3, 1, depthwise=True, eps=config.bn_eps,
                            bn_gamma=_BRANCH_GAIN)
    if kind == MIXER_MHSA:
        return MhsaBlock(
            wq=_uniform(rng, (c, c), c),
            wk=_uniform(rng, (c, c), c),
            wv=_uniform(rng, (c, c), c),
            wo=_uniform(rng, (c, c), c, gain=_BRANCH_GAIN),
            heads=config.heads,
        )
    n, r = config.token_count(stage), config.mhla_expansion
    return MhlaBlock(
        heads=config.heads,
        token_count=n,
        expansion=r,
        w_in=_uniform(rng, (config.heads, n, n * r), n),
        w_out=_uniform(rng, (config.heads, n * r, n), n * r, gain=_BRANCH_GAIN),
    )


def build_model(config: ModelConfig, seed: int) -> Model:
    """Instantiate a train-form model with deterministic seeded weights."""
    rng = np.random.default_rng(seed)
    stem = tuple(
        StemLayer(
            conv=_init_conv(rng, config.stem_dim, in_ch, 3, 2, 1, 1),
            bn=_init_bn(rng, config.stem_dim, config.bn_eps, gamma=2.5),
        )
        for in_ch in (3, config.stem_dim)
    )
    stages: list[tuple[Block, ...]] = []
    downsamplers: list[RepMixBlock] = []
    for stage in range(STAGE_COUNT):
        if stage > 0:
            downsamplers.append(
                _init_repmix(
                    rng,
                    config.stage_dims[stage - 1],
                    config.stage_dims[stage],
                    3,
                    2,
                    depthwise=False,
                    eps=config.bn_eps,
                    bn_gamma=1.6,
                )
            )
        blocks = []
        for _ in range(config.stage_blocks[stage]):
            mixer = _init_mixer(rng, config, stage)
            mlp = _init_mlp(rng, config.stage_dims[stage], config.mlp_expansion, config.bn_eps)
            blocks.append(Block(mixer=mixer, channel_mixer=mlp))
        stages.append(tuple(blocks))
    head_weight = _uniform(rng, (config.stage_dims[-1], config.embed_dim), config.stage_dims[-1])
    head_bias = _uniform(rng, (config.embed_dim,), config.stage_dims[-1])
    return Model(
        config=config,
        stem=stem,
        stages=tuple(stages),
        downsamplers=tuple(downsamplers),
        head_weight=head_weight,
        head_bias=head_bias,
        form=FORM_TRAIN,
    )


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------


def forward(model: Model, image: np.ndarray) -> np.ndarray:
    """Run one image [1, 3, s, s] to its embedding vector [embed_dim]."""
    config = model.config
    image = np.asarray(image, dtype=np.float32)
    expected = (1, 3, config.input_size, config.input_size)
    if image.shape != expected:
        raise ShapeError("input", f"expected image of shape {expected}, got {image.shape}")
    x = image
    for layer in model.stem:
        x = conv2d(x, layer.conv)
        if layer.bn is not None:
            x = batchnorm(x, layer.bn)
        x = gelu(x)
    for stage in range(STAGE_COUNT):
        if stage > 0:
            x = repmix_forward(model.downsamplers[stage - 1], x)
        res = config.stage_resolutions[stage]
        if x.shape[2] != res or x.shape[3] != res:
            raise ShapeError(
                "spatial", f"stage {stage + 1} runs at {x.shape[2]}x{x.shape[3]}, expected {res}"
            )
        for block in model.stages[stage]:
            x = block_forward(block.mixer, block.channel_mixer, x)
    pooled = avgpool_global(x)
    embedding = linear(pooled, model._head_weight64, model._head_bias64)
    return embedding[0]


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity of a zero-norm vector is undefined")
    return float(a @ b / (na * nb))


# ---------------------------------------------------------------------------
# Cost model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CostReport:
    """Parameter and MAC tallies; per-row values sum to the totals."""

    variant: str
    form: str
    total_params: int
    total_flops: int
    per_stage: tuple[tuple[str, int, int], ...]
    per_kind: tuple[tuple[str, int, int], ...]

    def __post_init__(self):
        for rows in (self.per_stage, self.per_kind):
            if sum(r[1] for r in rows) != self.total_params:
                raise ValueError("per-row parameter counts do not sum to the total")
            if sum(r[2] for r in rows) != self.total_flops:
                raise ValueError("per-row FLOP counts do not sum to the total")


def _conv_flops(spec: ConvSpec, out_res: int) -> int:
    return spec.out_channels * spec.in_per_group * spec.kernel_size**2 * out_res * out_res


def _repmix_costs(block: RepMixBlock, out_res: int) -> tuple[int, int]:
    flops = _conv_flops(block.conv_kxk, out_res)
    if block.conv_1x1 is not None:
        flops += _conv_flops(block.conv_1x1, out_res)
    if block.bn is not None:
        flops += block.bn.channels * out_res * out_res
    return block.param_count, flops


def _mlp_costs(block: MlpBlock, res: int) -> tuple[int, int]:
    positions = res * res
    c, hidden = block.w_expand.shape
    flops = positions * (c * hidden + hidden * c)
    if block.bn_inner is not None:
        flops += positions * hidden
    if block.bn_outer is not None:
        flops += positions * c
    return block.param_count, flops


def _model_components(model: Model):
    """Yield (stage_label, kind, params, flops) for every component."""
    config = model.config
    stem_res = (config.input_size // 2, config.input_size // 4)
    for layer, res in zip(model.stem, stem_res):
        flops = _conv_flops(layer.conv, res)
        if layer.bn is not None:
            flops += layer.bn.channels * res * res
        yield "stem", "stem", layer.param_count, flops
    for stage in range(STAGE_COUNT):
        label = f"stage{stage + 1}"
        res = config.stage_resolutions[stage]
        if stage > 0:
            params, flops = _repmix_costs(model.downsamplers[stage - 1], res)
            yield label, "downsample", params, flops
        for block in model.stages[stage]:
            if isinstance(block.mixer, RepMixBlock):
                params, flops = _repmix_costs(block.mixer, res)
                yield label, MIXER_REPMIX, params, flops
            elif isinstance(block.mixer, MhsaBlock):
                yield label, MIXER_MHSA, block.mixer.param_count, mhsa_complexity(
                    res * res, block.mixer.channels
                )
            else:
                mixer = block.mixer
                yield label, MIXER_MHLA, mixer.param_count, mhla_complexity(
                    mixer.token_count, config.stage_dims[stage], mixer.expansion
                )
            params, flops = _mlp_costs(block.channel_mixer, res)
            yield label, "mlp", params, flops
    head_params = model.head_weight.size + model.head_bias.size
    head_flops = model.head_weight.size
    yield "head", "head", head_params, head_flops


def cost_report(target: Model | ModelConfig, form: str | None = None, seed: int = 0) -> CostReport:
    """Tally parameters and MACs per stage and per block kind.

    ``target`` may be an instantiated model (counted as-is) or a config, in
    which case a model is synthesized in the requested ``form`` (default
    train) and counted; identical (config, seed) always yields an identical
    report.
    """
    if isinstance(target, ModelConfig):
        model = build_model(target, seed=seed)
        if (form or FORM_TRAIN) == FORM_DEPLOY:
            model, _ = reparameterize_model(model, probes=0)
    else:
        model = target
        if form is not None and form != model.form:
            raise FormError(f"model is in {model.form} form, not {form}")
    stage_totals: dict[str, list[int]] = {}
    kind_totals: dict[str, list[int]] = {}
    total_params = total_flops = 0
    for label, kind, params, flops in _model_components(model):
        stage_totals.setdefault(label, [0, 0])
        kind_totals.setdefault(kind, [0, 0])
        stage_totals[label][0] += params
        stage_totals[label][1] += flops
        kind_totals[kind][0] += params
        kind_totals[kind][1] += flops
        total_params += params
        total_flops += flops
    return CostReport(
        variant=model.config.variant,
        form=model.form,
        total_params=total_params,
        total_flops=total_flops,
        per_stage=tuple((k, v[0], v[1]) for k, v in stage_totals.items()),
        per_kind=tuple((k, v[0], v[1]) for k, v in kind_totals.items()),
    )


def count_params(target: Model | ModelConfig, form: str | None = None) -> CostReport:
    return cost_report(target, form=form)


def count_flops(target: Model | ModelConfig, form: str | None = None) -> CostReport:
    return cost_report(target, form=form)


def instrumented_flop_count(model: Model, image: np.ndarray) -> int:
    """Empirical MAC count of one forward pass, measured by op hooks."""
    with count_macs() as counter:
        forward(model, image)
    return counter.total


# ---------------------------------------------------------------------------
# Model-level reparameterization
# ---------------------------------------------------------------------------


def reparameterize_model(
    model: Model,
    options: FusionOptions = FusionOptions(),
    probes: int = 5,
    probe_seed: int = 0,
) -> tuple[Model, FusionReport]:
    """Fuse every RepMix block, channel MLP and stem norm of a model.

    Attention mixers contain no foldable structure and are shared as-is.
    Probe inputs are drawn uniform in [-1, 1]; the report carries the worst
    absolute embedding deviation across them.
    """
    if model.form != FORM_TRAIN:
        raise FormError("model is already in deploy form")
    fused_components = 0
    stem = []
    for layer in model.stem:
        if options.fuse_bn and layer.bn is not None:
            stem.append(StemLayer(conv=fuse_bn_into_conv(layer.conv, layer.bn), bn=None))
            fused_components += 1
        else:
            stem.append(layer)
    repmix_folds = int(options.fuse_bn or options.merge_1x1)
    downsamplers = []
    for ds in model.downsamplers:
        downsamplers.append(reparameterize_repmix(ds, options))
        fused_components += repmix_folds
    stages = []
    for stage_blocks in model.stages:
        blocks = []
        for block in stage_blocks:
            mixer = block.mixer
            if isinstance(mixer, RepMixBlock):
                mixer = reparameterize_repmix(mixer, options)
                fused_components += repmix_folds
            mlp = block.channel_mixer
            if options.fuse_bn:
                mlp = fuse_mlp_bn(mlp)
                fused_components += 1
            blocks.append(Block(mixer=mixer, channel_mixer=mlp))
        stages.append(tuple(blocks))
    deploy = Model(
        config=model.config,
        stem=tuple(stem),
        stages=tuple(stages),
        downsamplers=tuple(downsamplers),
        head_weight=model.head_weight,
        head_bias=model.head_bias,
        form=FORM_DEPLOY,
    )
    max_abs = 0.0
    rng = np.random.default_rng(probe_seed)
    for _ in range(probes):
        x = rng.uniform(-1.0, 1.0, (1, 3, model.config.input_size, model.config.input_size))
        x = x.astype(np.float32)
        delta = np.abs(forward(model, x) - forward(deploy, x)).max()
        max_abs = max(max_abs, float(delta))
    report = FusionReport(
        max_abs_error=max_abs,
        probe_count=probes,
        blocks_fused=fused_components,
        params_before=cost_report(model).total_params,
        params_after=cost_report(deploy).total_params,
    )
    return deploy, report

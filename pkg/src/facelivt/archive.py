"""On-disk weight archive: a flat list of named float32 tensors.

Layout (all integers little-endian unsigned 32-bit):

    magic            8 bytes, ``FLVTWTS1``
    entry count      u32
    per entry:
        name length  u32
        name         UTF-8 bytes
        rank         u32
        dims         u32 * rank
        payload      float32 little-endian, row-major, prod(dims) values

Entry names are unique; write -> read -> write round-trips bit-exactly.
Model structure rides in ``meta/...`` entries (config numbers, form tag,
per-block residual flags); everything else about a convolution's geometry
(stride, padding, grouping) is implied by its position in the network and
its weight shape.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .blocks import (
    FORM_DEPLOY,
    FORM_TRAIN,
    MhlaBlock,
    MhsaBlock,
    MlpBlock,
    RepMixBlock,
)
from .config import (
    MIXER_MHLA,
    MIXER_MHSA,
    MIXER_REPMIX,
    STAGE_COUNT,
    ModelConfig,
)
from .model import Block, Model, StemLayer
from .ops import BnSpec, ConvSpec

MAGIC = b"FLVTWTS1"

_MIXER_CODES = {MIXER_REPMIX: 0, MIXER_MHSA: 1, MIXER_MHLA: 2}
_MIXER_NAMES = {v: k for k, v in _MIXER_CODES.items()}
_FORM_CODES = {FORM_TRAIN: 0.0, FORM_DEPLOY: 1.0}


class ArchiveFormatError(ValueError):
    """The file is not a valid weight archive."""


Entries = list[tuple[str, np.ndarray]]


def write_archive(path: str | Path, entries: Entries) -> None:
    seen: set[str] = set()
    chunks = [MAGIC, struct.pack("<I", len(entries))]
    for name, array in entries:
        if name in seen:
            raise ArchiveFormatError(f"duplicate entry name {name!r}")
        seen.add(name)
        data = np.ascontiguousarray(np.asarray(array, dtype="<f4"))
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}I", *data.shape))
        chunks.append(data.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_archive(path: str | Path) -> Entries:
    blob = Path(path).read_bytes()
    if blob[:8] != MAGIC:
        raise ArchiveFormatError(f"bad magic {blob[:8]!r}, expected {MAGIC!r}")
    offset = 8

    def take(n: int, what: str) -> bytes:
        nonlocal offset
        if offset + n > len(blob):
            raise ArchiveFormatError(f"truncated archive while reading {what}")
        piece = blob[offset : offset + n]
        offset += n
        return piece

    (count,) = struct.unpack("<I", take(4, "entry count"))
    entries: Entries = []
    seen: set[str] = set()
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = take(name_len, "name").decode("utf-8")
        if name in seen:
            raise ArchiveFormatError(f"duplicate entry name {name!r}")
        seen.add(name)
        (rank,) = struct.unpack("<I", take(4, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = take(4 * size, f"payload of {name!r}")
        array = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
        entries.append((name, array))
    if offset != len(blob):
        raise ArchiveFormatError(f"{len(blob) - offset} trailing bytes after last entry")
    return entries


# ---------------------------------------------------------------------------
# Model <-> entries
# ---------------------------------------------------------------------------


def _bn_entries(prefix: str, bn: BnSpec | None) -> Entries:
    if bn is None:
        return []
    return [
        (f"{prefix}.gamma", bn.gamma),
        (f"{prefix}.beta", bn.beta),
        (f"{prefix}.mu", bn.mu),
        (f"{prefix}.sigma", bn.sigma),
    ]


def _conv_entries(prefix: str, conv: ConvSpec | None) -> Entries:
    if conv is None:
        return []
    return [(f"{prefix}.weight", conv.weight), (f"{prefix}.bias", conv.bias)]


def _repmix_entries(prefix: str, block: RepMixBlock) -> Entries:
    entries = _conv_entries(f"{prefix}.conv_kxk", block.conv_kxk)
    entries += _conv_entries(f"{prefix}.conv_1x1", block.conv_1x1)
    entries += _bn_entries(f"{prefix}.bn", block.bn)
    entries.append((f"{prefix}.residual_folded", np.float32([block.residual_folded])))
    return entries


def model_to_entries(model: Model) -> Entries:
    config = model.config
    meta = [float(d) for d in config.stage_dims]
    meta += [float(b) for b in config.stage_blocks]
    meta += [float(_MIXER_CODES[m]) for m in config.stage_mixers]
    meta += [float(r) for r in config.stage_resolutions]
    meta += [
        float(config.heads),
        float(config.mhla_expansion),
        float(config.mlp_expansion),
        float(config.embed_dim),
        float(config.input_size),
        float(config.bn_eps),
    ]
    entries: Entries = [
        ("meta/format_version", np.float32([1.0])),
        ("meta/form", np.float32([_FORM_CODES[model.form]])),
        (f"meta/variant/{config.variant}", np.float32([0.0])),
        ("meta/config", np.float32(meta)),
    ]
    for i, layer in enumerate(model.stem):
        entries += _conv_entries(f"stem{i}.conv", layer.conv)
        entries += _bn_entries(f"stem{i}.bn", layer.bn)
    for stage in range(STAGE_COUNT):
        if stage > 0:
            entries += _repmix_entries(f"down{stage - 1}", model.downsamplers[stage - 1])
        for b, block in enumerate(model.stages[stage]):
            prefix = f"stage{stage + 1}.block{b}"
            mixer = block.mixer
            if isinstance(mixer, RepMixBlock):
                entries += _repmix_entries(f"{prefix}.mixer", mixer)
            elif isinstance(mixer, MhsaBlock):
                entries += [
                    (f"{prefix}.mixer.wq", mixer.wq),
                    (f"{prefix}.mixer.wk", mixer.wk),
                    (f"{prefix}.mixer.wv", mixer.wv),
                    (f"{prefix}.mixer.wo", mixer.wo),
                ]
            else:
                entries += [
                    (f"{prefix}.mixer.w_in", mixer.w_in),
                    (f"{prefix}.mixer.w_out", mixer.w_out),
                ]
            mlp = block.channel_mixer
            entries += [
                (f"{prefix}.mlp.w_expand", mlp.w_expand),
                (f"{prefix}.mlp.w_reduce", mlp.w_reduce),
            ]
            entries += _bn_entries(f"{prefix}.mlp.bn_inner", mlp.bn_inner)
            entries += _bn_entries(f"{prefix}.mlp.bn_outer", mlp.bn_outer)
            if mlp.b_expand is not None:
                entries.append((f"{prefix}.mlp.b_expand", mlp.b_expand))
                entries.append((f"{prefix}.mlp.b_reduce", mlp.b_reduce))
    entries.append(("head.weight", model.head_weight))
    entries.append(("head.bias", model.head_bias))
    return entries


class _EntryMap:
    def __init__(self, entries: Entries):
        self.tensors = dict(entries)
        if len(self.tensors) != len(entries):
            raise ArchiveFormatError("duplicate entry names")

    def get(self, name: str) -> np.ndarray:
        if name not in self.tensors:
            raise ArchiveFormatError(f"missing entry {name!r}")
        return self.tensors[name]

    def maybe(self, name: str) -> np.ndarray | None:
        return self.tensors.get(name)

    def __contains__(self, name: str) -> bool:
        return name in self.tensors


def _read_bn(m: _EntryMap, prefix: str, eps: float) -> BnSpec | None:
    if f"{prefix}.gamma" not in m:
        return None
    return BnSpec(
        gamma=m.get(f"{prefix}.gamma"),
        beta=m.get(f"{prefix}.beta"),
        mu=m.get(f"{prefix}.mu"),
        sigma=m.get(f"{prefix}.sigma"),
        eps=eps,
    )


def _read_conv(m: _EntryMap, prefix: str, in_channels: int, stride: int) -> ConvSpec | None:
    weight = m.maybe(f"{prefix}.weight")
    if weight is None:
        return None
    if weight.ndim != 4:
        raise ArchiveFormatError(f"{prefix}.weight must be rank 4, got rank {weight.ndim}")
    in_per_group = weight.shape[1]
    if in_per_group == 0 or in_channels % in_per_group != 0:
        raise ArchiveFormatError(f"{prefix}.weight incompatible with {in_channels} input channels")
    k = weight.shape[2]
    return ConvSpec(
        weight=weight,
        bias=m.get(f"{prefix}.bias"),
        stride=stride,
        padding=(k - 1) // 2,
        groups=in_channels // in_per_group,
    )


def _read_repmix(m: _EntryMap, prefix: str, in_channels: int, stride: int, form: str,
                 eps: float) -> RepMixBlock:
    kxk = _read_conv(m, f"{prefix}.conv_kxk", in_channels, stride)
    if kxk is None:
        raise ArchiveFormatError(f"missing entry {prefix}.conv_kxk.weight")
    folded = bool(m.get(f"{prefix}.residual_folded")[0])
    return RepMixBlock(
        conv_kxk=kxk,
        conv_1x1=_read_conv(m, f"{prefix}.conv_1x1", in_channels, stride),
        bn=_read_bn(m, f"{prefix}.bn", eps),
        stride=stride,
        form=form,
        residual_folded=folded,
    )


def _read_config(m: _EntryMap) -> ModelConfig:
    raw = m.get("meta/config")
    if raw.shape != (22,):
        raise ArchiveFormatError(f"meta/config must hold 22 values, got {raw.shape}")
    variant = None
    for name in m.tensors:
        if name.startswith("meta/variant/"):
            variant = name.split("/", 2)[2]
    if variant is None:
        raise ArchiveFormatError("missing meta/variant entry")
    vals = raw.astype(np.float64)
    mixers = tuple(_MIXER_NAMES[int(c)] for c in vals[8:12])
    return ModelConfig(
        variant=variant,
        stage_dims=tuple(int(v) for v in vals[0:4]),
        stage_blocks=tuple(int(v) for v in vals[4:8]),
        stage_mixers=mixers,
        stage_resolutions=tuple(int(v) for v in vals[12:16]),
        heads=int(vals[16]),
        mhla_expansion=int(vals[17]),
        mlp_expansion=int(vals[18]),
        embed_dim=int(vals[19]),
        input_size=int(vals[20]),
        bn_eps=float(vals[21]),
    )


def model_from_entries(entries: Entries) -> Model:
    m = _EntryMap(entries)
    version = m.get("meta/format_version")[0]
    if version != 1.0:
        raise ArchiveFormatError(f"unsupported format version {version}")
    config = _read_config(m)
    form_code = float(m.get("meta/form")[0])
    form = FORM_DEPLOY if form_code == 1.0 else FORM_TRAIN
    eps = config.bn_eps
    stem = []
    for i, in_ch in enumerate((3, config.stem_dim)):
        conv = _read_conv(m, f"stem{i}.conv", in_ch, stride=2)
        if conv is None:
            raise ArchiveFormatError(f"missing entry stem{i}.conv.weight")
        stem.append(StemLayer(conv=conv, bn=_read_bn(m, f"stem{i}.bn", eps)))
    stages = []
    downsamplers = []
    for stage in range(STAGE_COUNT):
        c = config.stage_dims[stage]
        if stage > 0:
            downsamplers.append(
                _read_repmix(m, f"down{stage - 1}", config.stage_dims[stage - 1], 2, form, eps)
            )
        blocks = []
        for b in range(config.stage_blocks[stage]):
            prefix = f"stage{stage + 1}.block{b}"
            kind = config.stage_mixers[stage]
            if kind == MIXER_REPMIX:
                mixer = _read_repmix(m, f"{prefix}.mixer", c, 1, form, eps)
            elif kind == MIXER_MHSA:
                mixer = MhsaBlock(
                    wq=m.get(f"{prefix}.mixer.wq"),
                    wk=m.get(f"{prefix}.mixer.wk"),
                    wv=m.get(f"{prefix}.mixer.wv"),
                    wo=m.get(f"{prefix}.mixer.wo"),
                    heads=config.heads,
                )
            else:
                mixer = MhlaBlock(
                    heads=config.heads,
                    token_count=config.token_count(stage),
                    expansion=config.mhla_expansion,
                    w_in=m.get(f"{prefix}.mixer.w_in"),
                    w_out=m.get(f"{prefix}.mixer.w_out"),
                )
            bn_inner = _read_bn(m, f"{prefix}.mlp.bn_inner", eps)
            mlp = MlpBlock(
                w_expand=m.get(f"{prefix}.mlp.w_expand"),
                w_reduce=m.get(f"{prefix}.mlp.w_reduce"),
                bn_inner=bn_inner,
                bn_outer=_read_bn(m, f"{prefix}.mlp.bn_outer", eps),
                b_expand=m.maybe(f"{prefix}.mlp.b_expand"),
                b_reduce=m.maybe(f"{prefix}.mlp.b_reduce"),
                expansion=config.mlp_expansion,
                form=FORM_TRAIN if bn_inner is not None else FORM_DEPLOY,
            )
            blocks.append(Block(mixer=mixer, channel_mixer=mlp))
        stages.append(tuple(blocks))
    return Model(
        config=config,
        stem=tuple(stem),
        stages=tuple(stages),
        downsamplers=tuple(downsamplers),
        head_weight=m.get("head.weight"),
        head_bias=m.get("head.bias"),
        form=form,
    )


def save_model(path: str | Path, model: Model) -> None:
    write_archive(path, model_to_entries(model))


def load_model(path: str | Path) -> Model:
    return model_from_entries(read_archive(path))

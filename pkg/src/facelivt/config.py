"""Variant configurations and the declarative config-file format.

The four shipped variants share the stage skeleton (2/4/6/2 blocks at
28/14/7/4 spatial size behind a twice-striding stem) and differ in channel
widths and in the token mixer of stages 3-4: the S/M variants run softmax
attention there, the S-Li/M-Li variants run linear attention.

Config files are plain INI text, one section per stage plus a [model]
section; see ``configs/`` for the shipped files and the README for the key
reference.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

MIXER_REPMIX = "repmix"
MIXER_MHSA = "mhsa"
MIXER_MHLA = "mhla"

STAGE_COUNT = 4


@dataclass(frozen=True)
class ModelConfig:
    variant: str
    stage_dims: tuple[int, int, int, int]
    stage_blocks: tuple[int, int, int, int] = (2, 4, 6, 2)
    stage_mixers: tuple[str, str, str, str] = (MIXER_REPMIX, MIXER_REPMIX, MIXER_MHLA, MIXER_MHLA)
    stage_resolutions: tuple[int, int, int, int] = (28, 14, 7, 4)
    heads: int = 16
    mhla_expansion: int = 4
    mlp_expansion: int = 3
    embed_dim: int = 512
    input_size: int = 112
    bn_eps: float = 1e-5

    def __post_init__(self):
        # Kept at float32 precision so configs survive the archive format.
        object.__setattr__(self, "bn_eps", float(np.float32(self.bn_eps)))
        for name in ("stage_dims", "stage_blocks", "stage_mixers", "stage_resolutions"):
            value = tuple(getattr(self, name))
            object.__setattr__(self, name, value)
            if len(value) != STAGE_COUNT:
                raise ValueError(f"{name} must have {STAGE_COUNT} entries, got {len(value)}")
        for mixer in self.stage_mixers:
            if mixer not in (MIXER_REPMIX, MIXER_MHSA, MIXER_MHLA):
                raise ValueError(f"unknown mixer kind {mixer!r}")
        if any(d <= 0 for d in self.stage_dims) or any(b <= 0 for b in self.stage_blocks):
            raise ValueError("stage dims and block counts must be positive")
        # The stem strides twice, so stage 1 runs at a quarter of the input.
        if self.input_size // 4 != self.stage_resolutions[0]:
            raise ValueError(
                f"stem lands at {self.input_size // 4}, expected stage-1 size "
                f"{self.stage_resolutions[0]}"
            )
        for i in range(1, STAGE_COUNT):
            expected = (self.stage_resolutions[i - 1] + 1) // 2
            if self.stage_resolutions[i] != expected:
                raise ValueError(
                    f"stage {i + 1} size {self.stage_resolutions[i]} does not follow a "
                    f"stride-2 downsample of {self.stage_resolutions[i - 1]}"
                )
        for i, mixer in enumerate(self.stage_mixers):
            if mixer != MIXER_REPMIX and self.stage_dims[i] % self.heads != 0:
                raise ValueError(
                    f"stage {i + 1} width {self.stage_dims[i]} not divisible by "
                    f"{self.heads} heads"
                )
        if self.heads < 1 or self.mhla_expansion < 1 or self.mlp_expansion < 1:
            raise ValueError("heads and expansion ratios must be positive")
        if self.embed_dim < 1:
            raise ValueError("embedding width must be positive")

    @property
    def stem_dim(self) -> int:
        return self.stage_dims[0]

    def token_count(self, stage: int) -> int:
        return self.stage_resolutions[stage] ** 2

    def with_heads(self, heads: int) -> "ModelConfig":
        return replace(self, heads=heads)


def _preset(variant: str, dims: tuple[int, int, int, int], attention: str) -> ModelConfig:
    return ModelConfig(
        variant=variant,
        stage_dims=dims,
        stage_mixers=(MIXER_REPMIX, MIXER_REPMIX, attention, attention),
    )


VARIANTS: dict[str, ModelConfig] = {
    "s": _preset("s", (40, 80, 160, 320), MIXER_MHSA),
    "m": _preset("m", (64, 128, 256, 512), MIXER_MHSA),
    "s-li": _preset("s-li", (40, 80, 160, 320), MIXER_MHLA),
    "m-li": _preset("m-li", (64, 128, 256, 512), MIXER_MHLA),
}


def variant_config(name: str) -> ModelConfig:
    key = name.strip().lower()
    if key not in VARIANTS:
        known = ", ".join(sorted(VARIANTS))
        raise KeyError(f"unknown variant {name!r}; known variants: {known}")
    return VARIANTS[key]


# ---------------------------------------------------------------------------
# Config files
# ---------------------------------------------------------------------------


def load_config(path: str | Path) -> ModelConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    read = parser.read(path)
    if not read:
        raise FileNotFoundError(path)
    model = parser["model"]
    dims, blocks, mixers, sizes = [], [], [], []
    for i in range(1, STAGE_COUNT + 1):
        stage = parser[f"stage{i}"]
        dims.append(stage.getint("dim"))
        blocks.append(stage.getint("blocks"))
        mixers.append(stage.get("mixer").strip().lower())
        sizes.append(stage.getint("size"))
    return ModelConfig(
        variant=model.get("variant"),
        stage_dims=tuple(dims),
        stage_blocks=tuple(blocks),
        stage_mixers=tuple(mixers),
        stage_resolutions=tuple(sizes),
        heads=model.getint("heads", 16),
        mhla_expansion=model.getint("mhla_expansion", 4),
        mlp_expansion=model.getint("mlp_expansion", 3),
        embed_dim=model.getint("embed_dim", 512),
        input_size=model.getint("input_size", 112),
        bn_eps=model.getfloat("bn_eps", 1e-5),
    )


def save_config(config: ModelConfig, path: str | Path) -> None:
    lines = [
        "[model]",
        f"variant = {config.variant}",
        f"heads = {config.heads}",
        f"mhla_expansion = {config.mhla_expansion}",
        f"mlp_expansion = {config.mlp_expansion}",
        f"embed_dim = {config.embed_dim}",
        f"input_size = {config.input_size}",
        f"bn_eps = {config.bn_eps}",
        "",
    ]
    for i in range(STAGE_COUNT):
        lines += [
            f"[stage{i + 1}]",
            f"dim = {config.stage_dims[i]}",
            f"blocks = {config.stage_blocks[i]}",
            f"mixer = {config.stage_mixers[i]}",
            f"size = {config.stage_resolutions[i]}",
            "",
        ]
    Path(path).write_text("\n".join(lines))

"""Forward-only inference and structural reparameterization for the
FaceLiVT family of hybrid CNN-Transformer face-recognition backbones."""

from .blocks import (
    FORM_DEPLOY,
    FORM_TRAIN,
    FormError,
    MhlaBlock,
    MhsaBlock,
    MlpBlock,
    RepMixBlock,
    block_forward,
    mhla_forward,
    mhsa_forward,
    mlp_forward,
    repmix_forward,
)
from .config import ModelConfig, VARIANTS, load_config, save_config, variant_config
from .model import (
    Block,
    CostReport,
    Model,
    StemLayer,
    build_model,
    cosine_similarity,
    cost_report,
    count_flops,
    count_params,
    forward,
    instrumented_flop_count,
    mhla_complexity,
    mhsa_complexity,
    reparameterize_model,
)
from .ops import BnSpec, ConvSpec, FiniteError, MacCounter, ShapeError, count_macs
from .reparam import (
    FusionOptions,
    FusionReport,
    fuse_bn_into_conv,
    fuse_mlp_bn,
    merge_conv_branches,
    merge_dw_branches,
    reparameterize_repmix,
)
from .archive import (
    ArchiveFormatError,
    load_model,
    model_from_entries,
    model_to_entries,
    read_archive,
    save_model,
    write_archive,
)

__version__ = "0.1.0"

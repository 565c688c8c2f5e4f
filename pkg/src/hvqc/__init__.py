"""Entropy-coding toolkit for vector-quantized feature grids.

Core pieces: a shared VQ codebook, Gaussian-conditioned categorical index
models, a carry-aware range coder, classical context-model baselines, a
hyperprior (side-information) coding path, the multi-granularity container
format, and a toy end-to-end pipeline with staged training.
"""

__version__ = "0.1.0"

from .codebook import Codebook, quantize, dequantize, commitment_loss  # noqa: F401
from .index_model import (  # noqa: F401
    categorical_general,
    categorical_isotropic,
    cross_entropy_rate,
    mahalanobis_sq,
    shannon_entropy,
)
from .range_coder import RangeDecoder, RangeEncoder, quantize_pmf  # noqa: F401
from .hyperprior import (  # noqa: F401
    HyperConfig,
    HyperParams,
    hyper_analysis,
    hyper_synthesis,
    init_hyper_params,
    train_stage_b,
)
from .bitstream import (  # noqa: F401
    ContainerParts,
    RoutingMask,
    allocate_masks,
    deserialize,
    layout,
    serialize,
)
from .pipeline import (  # noqa: F401
    RdWeights,
    ToyCoderConfig,
    ToyCoderParams,
    TrainConfig,
    TrainResult,
    decode_image,
    encode_image,
    rate_report,
    train_stages,
)

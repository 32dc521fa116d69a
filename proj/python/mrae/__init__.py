"""Multiresolution attention feature fusion toolkit.

Thin wrapper over the C++ core: tensor ops (conv2d, pooling, upsampling,
softmax, cosine similarity), the Fusion class covering the soft, template
(mrae) and hard fusion variants, the synthetic small-object dataset
generator, scalar k-means, the COCO small-object filter, and the
finite-difference gradient checker.
"""

from ._mrae import (
    Fusion,
    __version__,
    conv2d,
    cosine_similarity,
    filter_coco_text,
    generate_synthetic,
    global_avg_pool,
    global_max_pool,
    gradcheck,
    kmeans_1d,
    max_pool2d,
    relu,
    softmax,
    upsample,
)

__all__ = [
    "Fusion",
    "__version__",
    "conv2d",
    "cosine_similarity",
    "filter_coco_text",
    "generate_synthetic",
    "global_avg_pool",
    "global_max_pool",
    "gradcheck",
    "kmeans_1d",
    "max_pool2d",
    "relu",
    "softmax",
    "upsample",
]

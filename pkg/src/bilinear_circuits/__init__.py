"""Bilinear MLP layers as third-order tensors, path expansion of a one-layer
attention + bilinear-MLP transformer, and feature-analysis tools."""

__version__ = "0.1.0"

from .bilinear import (  # noqa: E402
    BilinearLayer,
    FeatureSet,
    ThirdOrderForm,
    apply_quadratic,
    build_b,
    build_b_by_contraction,
    build_z,
    evaluate_form,
    forward,
    pairwise_decompose,
)
from .tensor_core import hosvd, mode_fold, mode_unfold, tensor_inner, tucker_reconstruct  # noqa: E402

__all__ = [
    "BilinearLayer", "FeatureSet", "ThirdOrderForm", "apply_quadratic", "build_b", "build_b_by_contraction",
    "build_z", "evaluate_form", "forward", "pairwise_decompose", "hosvd", "mode_fold", "mode_unfold",
    "tensor_inner", "tucker_reconstruct", "__version__",
]

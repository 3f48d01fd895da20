"""jotrecon: dense one-bit sensor simulation and image reconstruction.

Simulates a jot sensor (Poisson photoelectrons thresholded per pixel
into binary frames) and reconstructs the latent intensity image by
maximum-likelihood descent, sparse-prior ISTA/FISTA over a learned
dictionary, or a trained unrolled-ISTA network.
"""

from .errors import DimensionMismatchError, DivergenceError, NonFiniteError
from .likelihood import (EPS_LAMBDA, grad_lambda, hess_lambda,
                         lipschitz_bound, neg_log_likelihood, tail_prob)
from .metrics import PsnrResult, psnr, quality_curve
from .sensor import (BinaryFrameStack, ForwardOperator, IntensityImage,
                     RngState, apply_adjoint, apply_forward,
                     make_threshold_pattern, sample_poisson, simulate)
from .sparse import (Dictionary, Nonlinearity, PatchGrid, average_patches,
                     extract_patches, synthesize)

__version__ = "0.1.0"

__all__ = [
    "BinaryFrameStack", "Dictionary", "DimensionMismatchError",
    "DivergenceError", "EPS_LAMBDA", "ForwardOperator", "IntensityImage",
    "Nonlinearity", "NonFiniteError", "PatchGrid", "PsnrResult", "RngState",
    "apply_adjoint", "apply_forward", "average_patches", "extract_patches",
    "grad_lambda", "hess_lambda", "lipschitz_bound", "make_threshold_pattern",
    "neg_log_likelihood", "psnr", "quality_curve", "sample_poisson",
    "simulate", "synthesize", "tail_prob",
]

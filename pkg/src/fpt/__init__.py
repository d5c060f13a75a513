"""Cross-scale feature pyramid attention library.

Core pieces: a float64 tensor/autodiff engine (:mod:`fpt.tensor`), shared
attention primitives (:mod:`fpt.attention`), the four pyramid transformers
(:mod:`fpt.transformers`), pyramid assembly (:mod:`fpt.pyramid`), complexity
accounting (:mod:`fpt.accounting`), weight serialization (:mod:`fpt.weights`)
and the service/CLI harness (:mod:`fpt.service`, :mod:`fpt.cli`).
"""

from .errors import ConfigError, ContractError, FptError, NumericsError, ShapeError
from .pyramid import (
    DropBlockConfig,
    FeaturePyramid,
    FptConfig,
    FptParams,
    PyramidLevel,
    build_ufp,
    dropblock,
    fpt_forward,
    init_fpt_params,
    init_ufp_params,
    synth_pyramid,
)
from .tensor import Tensor, backward, finite_diff_grad, no_grad

__all__ = [
    "ConfigError",
    "ContractError",
    "DropBlockConfig",
    "FeaturePyramid",
    "FptConfig",
    "FptError",
    "FptParams",
    "NumericsError",
    "PyramidLevel",
    "ShapeError",
    "Tensor",
    "backward",
    "build_ufp",
    "dropblock",
    "finite_diff_grad",
    "fpt_forward",
    "init_fpt_params",
    "init_ufp_params",
    "no_grad",
    "synth_pyramid",
]

__version__ = "0.1.0"

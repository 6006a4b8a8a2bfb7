"""Subject/motion customization testbed for flow-matching video diffusion:
a lossless toy codec, a small diffusion transformer with named adapter
targets, differentiable optical-flow alignment, procedural data with
analytic ground truth, and the attribution experiments, all verifiable by
algebraic identities and finite-difference gradient checks.
"""

from . import (cli, data, dit, errors, evaluation, flowmatch, lora, mora,
               numerics, pipeline, sura, toyvae)
from .numerics import ParamStore, Tensor, grad_check, softmax_rows

__version__ = "0.1.0"

__all__ = [
    "cli", "data", "dit", "errors", "evaluation", "flowmatch", "lora",
    "mora", "numerics", "pipeline", "sura", "toyvae",
    "ParamStore", "Tensor", "grad_check", "softmax_rows", "__version__",
]

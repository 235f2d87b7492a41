"""Quasi-stationary distributions of continuous-time jump processes with killing."""

__version__ = "0.1.0"

from .errors import QsdError  # noqa: E402
from .model import GeneratorModel, ModelFamilySpec, build_model, exit_states, make_family, truncate  # noqa: E402
from .qsd import assemble_qsd, invariant_measure, invariant_vector, solve_qsd_direct, verify_qsd  # noqa: E402
from .spectral import classify, decay_parameter, embedded_chain  # noqa: E402
from .taboo import exit_kernel, taboo_power, taboo_series  # noqa: E402
from .htransform import h_transform, hitting_prob, moment_bound  # noqa: E402

__all__ = [
    "__version__",
    "QsdError",
    "GeneratorModel",
    "ModelFamilySpec",
    "build_model",
    "exit_states",
    "make_family",
    "truncate",
    "assemble_qsd",
    "invariant_measure",
    "invariant_vector",
    "solve_qsd_direct",
    "verify_qsd",
    "classify",
    "decay_parameter",
    "embedded_chain",
    "exit_kernel",
    "taboo_power",
    "taboo_series",
    "h_transform",
    "hitting_prob",
    "moment_bound",
]

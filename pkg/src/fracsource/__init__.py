"""Recover the spatial factor f of a separable source f(x) sigma(t) in the 1D fractional heat
equation from observations of u and u_t on a subdomain, using penalized null controls."""

from .catalogue import catalogue_f, catalogue_sigma
from .config import RunConfig, load_config, make_config
from .control import build_control_family, select_epsilon, solve_hum, verify_null_control
from .dynamics import SigmaProfile, TimeGrid, observe, solve_backward, solve_forward, spectral_forward
from .errors import ConfigError, FracSourceError, NumericalError, PreconditionError, ValidityWarning
from .mesh_fem import FractionalOrder, assemble_mass, assemble_stiffness, build_mesh, make_mask
from .pipeline import Cache, emit_outputs, run_pipeline
from .reconstruction import compute_cn, recover_coefficients, reconstruct_source
from .spectral import SpectralBasis, project, solve_eigenbasis, synthesize
from .volterra import solve_family, solve_volterra

__version__ = "0.1.0"

__all__ = [
    "Cache", "ConfigError", "FracSourceError", "FractionalOrder", "NumericalError", "PreconditionError",
    "RunConfig", "SigmaProfile", "SpectralBasis", "TimeGrid", "ValidityWarning", "assemble_mass",
    "assemble_stiffness", "build_control_family", "build_mesh", "catalogue_f", "catalogue_sigma", "compute_cn",
    "emit_outputs", "load_config", "make_config", "make_mask", "observe", "project", "recover_coefficients",
    "reconstruct_source", "run_pipeline", "select_epsilon", "solve_backward", "solve_eigenbasis", "solve_family",
    "solve_forward", "solve_hum", "solve_volterra", "spectral_forward", "synthesize", "verify_null_control",
]

"""Structured-grid multigrid with convolution stencils and learned smoothers."""

from .discretization import PdeSpec, assemble_matrix, build_levels, q1_stencil
from .grid import ContractError, StencilKernel, conv, deconv, prolong, restrict
from .mgnet import (
    MetaMgNetDirect, MetaMgNetSC, PdeMgNet, learned_solve, load_checkpoint, save_checkpoint,
)
from .multigrid import Hierarchy, MgConfig, SolveReport, SolverDiverged, mg_cycle, solve
from .smoothers import SmootherSpec, sc_apply
from .training import TrainConfig, train

__all__ = [
    "ContractError", "Hierarchy", "MetaMgNetDirect", "MetaMgNetSC", "MgConfig", "PdeMgNet",
    "PdeSpec", "SmootherSpec", "SolveReport", "SolverDiverged", "StencilKernel", "TrainConfig",
    "assemble_matrix", "build_levels", "conv", "deconv", "learned_solve", "load_checkpoint",
    "mg_cycle", "prolong", "q1_stencil", "restrict", "save_checkpoint", "sc_apply", "solve", "train",
]

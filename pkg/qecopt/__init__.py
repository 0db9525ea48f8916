"""Quantum error-correction design by alternating semidefinite programs."""
from qecopt.channels import ChannelError, DensityMatrix, QuantumChannel
from qecopt.config import ConfigError, NumericPolicy, get_policy, use_policy
from qecopt.design import DesignError, DesignResult, biconvex_design, robust_design
from qecopt.sdp import SdpProblem, SdpSolution, SolverError

__version__ = "0.1.0"

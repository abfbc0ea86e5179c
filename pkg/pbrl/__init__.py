"""Penalty-based bilevel reinforcement learning on tabular MDPs and zero-sum Markov games."""

from .algorithm import BilevelProblem, PBRLConfig, RunTrace, independent_pg_run, pbrl_run
from .errors import (
    ConfigError,
    ContractViolationError,
    DivergenceError,
    OracleFailureError,
    PBRLError,
    UnsupportedStructureError,
    ValidationError,
)
from .mdp_core import ParamMDP
from .oracle import OracleConfig, solve_lower_level
from .penalty import PenaltyKind, PenaltySpec
from .policy import Policy, Regularizer
from .zerosum import ZeroSumBilevelProblem, ZeroSumGame, pbrl_zs_run

__version__ = "0.1.0"

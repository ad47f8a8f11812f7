"""Deterministic federated-learning simulator with rank-1 factorized kernels.

Modules: ``nn`` (layers and hand-written backprop), ``factorized`` (the
``u v^T + mu`` reparameterization), ``data`` (datasets and heterogeneous
partitions), ``engine`` (round loop, aggregation, cost ledger), ``probes``
(divergence and similarity diagnostics), ``config``/``runner``/``cli``
(experiment orchestration).
"""

from .errors import ConfigError, FormatError, InputError, NumericError
from .factorized import FactorizedParam, ModelParams, init_model, param_count, reconstruct
from .engine import Federation, StrategyConfig, TrainConfig, comm_cost, formula_cost
from .runner import run_experiment, run_suite

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "FormatError", "InputError", "NumericError",
    "FactorizedParam", "ModelParams", "init_model", "param_count", "reconstruct",
    "Federation", "StrategyConfig", "TrainConfig", "comm_cost", "formula_cost",
    "run_experiment", "run_suite",
]

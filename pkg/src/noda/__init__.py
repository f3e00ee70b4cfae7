"""Neural-ODE auto-encoder world models for model-assisted reinforcement learning."""
from .diffcore import ContractError, DimensionError, DomainError
from .envs import Pendulum, SpringMass, make_env
from .model import AEBaselineModel, NodaModel
from .odeint import IntegratorConfig, integrate

__all__ = [
    "AEBaselineModel", "ContractError", "DimensionError", "DomainError", "IntegratorConfig",
    "NodaModel", "Pendulum", "SpringMass", "integrate", "make_env",
]

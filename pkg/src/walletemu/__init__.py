"""Desk-scale emulator of a partitioned confidential serverless runtime,
paired with a deterministic trace-driven scale-out simulator."""

from .errors import EmulatorError
from .images import FunctionSpec, PipelineOp, ZygoteImage
from .memory import CostModel, PrivilegeLevel
from .monitor import InvocationRequest, Monitor, MonitorConfig, ProviderPolicy
from .provider import FunctionProvider, UserAgent

__version__ = "0.1.0"

__all__ = [
    "CostModel",
    "EmulatorError",
    "FunctionProvider",
    "FunctionSpec",
    "InvocationRequest",
    "Monitor",
    "MonitorConfig",
    "PipelineOp",
    "PrivilegeLevel",
    "ProviderPolicy",
    "UserAgent",
    "ZygoteImage",
    "__version__",
]

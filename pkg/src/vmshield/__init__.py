"""Security-aware VM placement, consolidation and link auditing in a simulated datacenter."""

from .core import Application, Link, ModelError, ResourceVector, Server, Task, Vm
from .scenario import ScenarioConfig, ScenarioError
from .simulator import Metrics, SimulationResult, run

__all__ = ["Application", "Link", "Metrics", "ModelError", "ResourceVector", "ScenarioConfig",
           "ScenarioError", "Server", "SimulationResult", "Task", "Vm", "run"]
__version__ = "0.1.0"

"""nodelearn: a deterministic simulator for decentralised per-node continual
learning with opportunistic, context-aware knowledge exchange.

Federated and gossip training are recoverable as engine configurations, and
run traces carry everything needed to compute energy-per-update,
collaboration efficiency, adaptation latency, and resilience ratio.
"""

__version__ = "0.1.0"

from .config import ScenarioConfig, load_config, validate_config
from .engine import SimState, checkpoint, restore, run, tick

__all__ = ["ScenarioConfig", "SimState", "checkpoint", "load_config", "restore",
           "run", "tick", "validate_config", "__version__"]

# Experiment routers for the timecon CLI
from timecon.experiments import duality, forward, utilities, values
from timecon.experiments.registry import Experiment, Registry, RunContext

registry = Registry()

# Include routers
registry.include_router(values.router)
registry.include_router(duality.router)
registry.include_router(utilities.router)
registry.include_router(forward.router)

__all__ = ["Experiment", "Registry", "RunContext", "registry"]

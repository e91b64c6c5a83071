"""demotrial: three-stage Bayesian dose exploration, monitoring, and
optimization trial engine with a scenario simulator and conduct service."""

__version__ = "0.1.0"

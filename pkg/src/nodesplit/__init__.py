"""Node-splitting conflict diagnostics for Bayesian evidence synthesis."""
__version__ = "0.1.0"

"""Multi-scale conditioned diffusion for time-series generation and forecasting."""

__version__ = "0.1.0"

"""Daily remaining length-of-stay forecasting with liquid time-constant networks."""

__version__ = "0.1.0"

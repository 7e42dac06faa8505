"""Call-center arrival forecasting with Gaussian mixed models, and the staffing arithmetic built on it."""

__version__ = "0.1.0"

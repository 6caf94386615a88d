"""Volatility forecasting with GARCH features and an attention-free LSTM."""

__version__ = "0.1.0"

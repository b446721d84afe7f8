"""Co-trained distributional transforms for realized volatility forecasting."""

__version__ = "0.1.0"

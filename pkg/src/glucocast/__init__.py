"""Synthetic type-1-diabetes glucose forecasting: simulation, on-board features,
SISAL input selection, forecasters and a walk-forward evaluation harness."""

__version__ = "0.1.0"

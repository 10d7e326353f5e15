"""Per-O&D weekly cargo demand forecasting.

Panel data model, statistical and neural forecaster pool, episodic
meta-training, per-O&D expert selection by validation loss, and a
weighted-nRMSE backtest harness.
"""

__version__ = "0.1.0"

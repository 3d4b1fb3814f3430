"""Daily stock-ranking research pipeline.

Ingests per-stock OHLCV panels, engineers open-price technical features,
trains small 1D CNN classifiers under a return-weighted cross-entropy
objective with walk-forward retraining, combines them into
performance-weighted ensembles, and evaluates daily-rebalancing
portfolios with risk-adjusted analytics.
"""

__version__ = "0.1.0"

"""Federated short-term load forecasting with differential privacy and secure aggregation.

A deterministic, desk-scale simulator: smart-meter data pipeline, from-scratch
LSTM/conv forecasting models, FedAvg/FedSGD, correlation-based client bundling,
central differential privacy with fixed or adaptive clipping, a Renyi-DP
accountant, and dropout-tolerant secure aggregation over a prime field.
"""

__version__ = "0.1.0"

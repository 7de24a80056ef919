"""Multi-scale convolutional recurrent encoder-decoder for multivariate time series anomalies."""

__version__ = "0.1.0"

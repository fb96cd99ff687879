"""Semi-supervised domain adaptation for satellite image time series with a
source-regularized TempCNN."""

__version__ = "0.1.0"

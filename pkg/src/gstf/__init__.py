"""Anomaly-aware global spatio-temporal fusion forecasting in pure numpy."""

from .anomaly import MovingAverageAnomalyDetector, detect_anomalies
from .data import HistoricalInertiaForecaster, TrafficSeries, ZScoreScaler, hi_baseline, metrics
from .estimator import GSTFForecaster
from .graph import build_mask, hop_distances, laplacian_embedding, load_graph
from .model import GSTFConfig, GSTFModel, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "GSTFConfig",
    "GSTFForecaster",
    "GSTFModel",
    "HistoricalInertiaForecaster",
    "MovingAverageAnomalyDetector",
    "TrafficSeries",
    "ZScoreScaler",
    "build_mask",
    "detect_anomalies",
    "hi_baseline",
    "hop_distances",
    "laplacian_embedding",
    "load_checkpoint",
    "load_graph",
    "metrics",
    "save_checkpoint",
]

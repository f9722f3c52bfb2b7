"""Trajectory-based meta-learning for temporal recommendation."""

__version__ = "0.1.0"

from .data import DataError, TimeSlicedDataset, ingest, slice_by_time  # noqa: E402
from .estimator import BPRMF, LeapRec  # noqa: E402
from .meta import TrainConfig, train  # noqa: E402

__all__ = ["BPRMF", "DataError", "LeapRec", "TimeSlicedDataset", "TrainConfig", "ingest",
           "slice_by_time", "train"]

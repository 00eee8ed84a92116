"""Slow/fast event-camera single-object tracking.

Event streams are stacked into frames and downsampled into K-NN graphs; a
two-layer GCN pyramid is fused into a 12-block (slow) and a 6-block (fast)
transformer backbone. The fast tracker emits several low-latency predictions
per frame window by accumulating event graphs, and a two-stage recipe trains
the pair: independent stage-1 training, then unified fine-tuning with the
slow tracker frozen as a feature-distillation teacher.
"""

__version__ = "0.1.0"

from .config import ModelConfig, TrainConfig, desk_config, full_config  # noqa: F401
from .events import (EventPoint, EventStream, FrameStack,  # noqa: F401
                     SequenceRecord, load_sequence, save_sequence)
from .graphs import EventGraph, ClusterAssignment  # noqa: F401

"""SurgMotion: test-time-optimization point tracking for surgical video.

Fits a per-video motion model (invertible coupling maps into a canonical 3D
volume plus a density/color coordinate network) to precomputed optical flow
and feature matches, exports dense point trajectories with visibility, and
scores them with the TAP benchmark metrics (AJ, <delta-avg, OA).
"""

from .data import (
    Query,
    QuerySpec,
    TrackedPoint,
    TrajectorySet,
    VideoSequence,
    load_sequence,
    load_trajectories,
    resize_for_eval,
    save_sequence,
    save_trajectories,
)
from .metrics import (
    MetricsReport,
    average_jaccard,
    build_report,
    challenging_split,
    delta_avg,
    occlusion_accuracy,
)
from .model import ModelConfig, MotionModel, ParameterStore, load_checkpoint, save_checkpoint
from .render import composite, lift, map_chain, predict
from .supervision import (
    FlowField,
    MatchSet,
    StoreConfig,
    SupervisionStore,
    appearance_filter,
    build_store,
    cycle_filter,
    sample_batch,
)
from .train import TrainConfig, adam_step, export_trajectories, train

__version__ = "0.1.0"

"""skelflow: a rectified-flow skeletal motion engine.

One conditional flow model covers generation from text + skeleton
conditions, inversion-free text editing, and intra-structural retargeting,
all on a hand-rolled float64 numerics stack.
"""

__version__ = "0.1.0"

from .features import FeatureLayout, NormStats, encode, decode_direct, decode_fk  # noqa: E402,F401
from .flow import (GuidanceWeights, ConditionSet, TrainConfig, sample, train,  # noqa: E402,F401
                   load_checkpoint, save_checkpoint)
from .flowedit import EditConfig, edit_text, retarget, transport  # noqa: E402,F401
from .kinematics import MotionClip, Skeleton, Topology, forward_kinematics  # noqa: E402,F401
from .model import ModelConfig, init_parameters, model_forward  # noqa: E402,F401
from .synthdata import DataConfig, build_dataset, make_skeleton  # noqa: E402,F401

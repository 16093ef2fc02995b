"""Learn a camera-robot model from images of a moving arm, then servo with it.

The model maps joint angles to the pixel coordinates of features on the
end-effector: DH kinematics, feature positions in the tool frame, and
pinhole cameras.  It is learned in stages (camera structure, kinematics,
joint refinement) and inverted by optimization for visual servoing.
"""

from .data import Dataset, Observation
from .errors import GenservoError
from .geometry import Pose, PoseParams
from .inference import (
    ServoTarget,
    ServoTrace,
    SimRobot,
    infer_joints_from_image,
    infer_joints_from_pose,
    infer_pose_from_image,
    servo_loop,
    servo_step,
)
from .learning import (
    LearnConfig,
    LearnResult,
    ModelHandle,
    WorldHints,
    detect_change,
    learn_camera_structure,
    learn_full,
    learn_kinematics,
    learn_pipeline,
    learn_unobserved,
    online_update,
    rms_px,
)
from .model import (
    CameraParams,
    KinematicParams,
    ModelParams,
    forward_kinematics,
    pack,
    parameter_count,
    predict_image,
    unpack,
)
from .simulator import make_world

__version__ = "0.1.0"

__all__ = [
    "CameraParams",
    "Dataset",
    "GenservoError",
    "KinematicParams",
    "LearnConfig",
    "LearnResult",
    "ModelHandle",
    "ModelParams",
    "Observation",
    "Pose",
    "PoseParams",
    "ServoTarget",
    "ServoTrace",
    "SimRobot",
    "WorldHints",
    "detect_change",
    "forward_kinematics",
    "infer_joints_from_image",
    "infer_joints_from_pose",
    "infer_pose_from_image",
    "learn_camera_structure",
    "learn_full",
    "learn_kinematics",
    "learn_pipeline",
    "learn_unobserved",
    "make_world",
    "online_update",
    "pack",
    "parameter_count",
    "predict_image",
    "rms_px",
    "servo_loop",
    "servo_step",
    "unpack",
]

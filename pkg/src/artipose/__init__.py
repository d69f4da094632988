"""artipose: joint-angle trajectories for articulated rigid-body scenes
from dense two-view correspondences, plus a synthetic ground-truth simulator."""

__version__ = "0.1.0"

from .geometry import (
    CameraIntrinsics,
    Correspondences,
    EssentialMatrix,
    RigidMotion,
    decompose_essential,
    estimate_essential_8pt,
    epipolar_residual,
    sampson_distance,
    skew,
    triangulate_midpoint,
)
from .kinematics import (
    FramePose,
    Joint,
    JointTrajectory,
    KinematicChain,
    accumulate,
    joint_angle_from_rotation,
    to_model_frame,
)
from .flow import (
    DepthMap,
    FlowField,
    Image,
    photometric_loss,
    read_depth,
    read_flo,
    refine_flow,
    sample_bilinear,
    write_depth,
    write_flo,
)
from .segmentation import PartLabeling, SegmentationConfig, em_refine, ransac_init
from .simulator import ArticulatedScene, NoiseSpec, make_scene, perturb, render
from .ba import (
    PointCloud,
    InlierSet,
    accumulate_cloud,
    backproject,
    final_ba,
    recover_scale,
    refine_pair_pose,
    select_inliers,
)
from .pipeline import EvaluationReport, PipelineConfig, evaluate, run_ablation, run_pipeline

__all__ = [name for name in dir() if not name.startswith("_")]

"""Motion-conditioned toy video generation: synthetic flow data, flow codec, filtering, flow matching and metrics."""

from .camera import (CameraIntrinsics, CameraPose, look_at, pixel_rays, plucker_embedding, project,
                     rotation_geodesic, unproject)
from .codec import CodecConfig, compute_scale_factor, encode_flow, flow_to_rgb, normalize_flow, rgb_to_flow
from .errors import DataError, DegenerateScaleError, MotionKitError, NumericalError, UnscorableClipError
from .filtering import ConsistencyReport, clip_score, cycle_error_map, filter_dataset
from .flow import FlowField, FrameSequence
from .flowmatch import FMConfig, FMModel, TrainRecord, fm_interpolate, fm_loss, fm_target_velocity, sample, train
from .manifest import DatasetManifest, ManifestEntry
from .metrics import MetricReport, NoisySample, add_noise_snr, mean_rotation_error, motion_error
from .estimate import estimate_flow_naive
from .trajectory import NurbsSpec, Trajectory, nurbs_eval, nurbs_trajectory, sample_hemisphere_pose

__version__ = "0.1.0"

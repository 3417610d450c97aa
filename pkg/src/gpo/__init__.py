"""Deformable image registration with optimizable Gaussian control nodes.

Sparse control nodes (trainable center, displacement and radius) are blended
through KNN softmax-Gaussian interpolation into a dense displacement field,
optimized against an intensity + keypoint-consistency loss with hand-derived
gradients and per-group Adam updates.
"""

__version__ = "0.1.0"

from .coarse import GlobalTransform, MatchSet, RansacConfig, apply_global, \
    fit_affine, fit_homography, read_matches, to_coarse_frame, write_matches
from .errors import ConsistencyError, DegenerateInputError, DegeneratePointError, \
    GenerationError, GpoError, ImageFormatError, NoConsensusError, \
    NumericalFailureError
from .field import NeighborIndex, blend, build_knn, field_stats, read_field, \
    warp, write_field
from .image import gaussian_blur, load_image, read_image_f32, resize_bilinear, \
    sample_bilinear, sample_bilinear_many, save_image_u8, write_image_f32
from .loss import GradcheckConfig, GradcheckReport, LossReport, LossWeights, \
    NodeGrads, backward, gcc_loss, gradcheck, ncc_loss, total_loss
from .metrics import AUCCurve, LandmarkPairs, TREStats, auc, map_fixed_to_moving, \
    read_landmarks, tre, write_landmarks, write_report
from .nodes import ControlNode, NodeSet, RadiusConfig, beta_for_radius, init_dcn, \
    init_gcn, radius_grad, radius_of, read_nodes, subsample_keypoints, write_nodes
from .optim import AdamState, OptimConfig, PipelineConfig, PreprocConfig, \
    RegistrationResult, adam_step, register, run_pipeline, write_run_artifacts
from .synth import SynthConfig, SynthPair, gen_deformation, gen_vessel_image, \
    make_pair, read_pair_bundle, write_pair_bundle

"""Latent-codebook 6D object pose estimation at desk scale.

Subpackages cover the full pipeline: view-sphere geometry, depth rendering,
codebook construction and cosine-kNN lookup, projective distance and
perspective correction, point-to-plane ICP refinement, VSD/ADD/ADI metrics,
the domain-randomization augmentation suite, and the toy autoencoder
experiment on rotated squares.
"""

__version__ = "0.1.0"

from . import augment, codebook, geometry, icp, metrics, pipeline, render, scenes, squares, toyae  # noqa: F401
from .codebook import Codebook, CodebookEntry, build_codebook, cosine_similarity, knn_query, load_codebook, save_codebook
from .geometry import (
    CameraIntrinsics,
    Pose,
    ViewSphere,
    geodesic_distance,
    inplane_rotations,
    project,
    subdivide_icosahedron,
    viewpoint_to_rotation,
)
from .icp import IcpConfig, PointCloud, backproject, estimate_normals, icp_refine, icp_refine_z
from .metrics import EvalRecord, VsdParams, add_correct, add_error, adi_error, auc_vsd, recall_at, vsd_error
from .pipeline import Detection, DistanceContext, estimate_distance, estimate_pose, estimate_translation, perspective_correction, square_crop
from .render import DepthImage, TriangleMesh, generate_codebook_views, load_mesh, render_depth, silhouette_bbox

__all__ = [name for name in dir() if not name.startswith("_")]

"""Morphable 3D face model toolkit.

Builds PCA shape/texture/expression models from registered mesh datasets,
registers a fixed-topology template to scans, trains conditional detail and
expression generators over UV maps, and fits the coarse-to-fine model to a
single image through a differentiable software renderer.
"""

from facemorph.mesh import TriMesh, LandmarkSet, vertex_normals, load_mesh, save_mesh
from facemorph.uvmap import UVMap, TemplateAtlas, unwrap_to_uv, resample_uv_to_vertices, upsample_uv, normal_map
from facemorph.morphable import PcaModel, BaseModel, BaseParams, build_pca, merge_shape_basis, eval_base, save_model, load_model
from facemorph.registration import RigidTransform, ScanTarget, umeyama_align, landmark_align, nonrigid_icp, fit_base_to_scan, eval_mae

__version__ = "0.1.0"

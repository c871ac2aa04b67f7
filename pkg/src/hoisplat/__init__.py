"""hoisplat: joint human-object scene refinement over 3D Gaussian splats.

A differentiable splat renderer with an analytic backward pass, LBS-driven
human and similarity-transformed object splats, the four-term refinement
objective (reconstruction, text-guidance appearance, contact, collision),
contact-consistent mesh conversion, and a geometric evaluation suite.
"""

from .camera import Camera, SphericalSampler, sample_viewpoint
from .guidance import (
    GuidanceProvider,
    GuidanceRequest,
    GuidanceResponse,
    HttpGuidance,
    MockTargetGuidance,
    NullGuidance,
)
from .losses import LossBreakdown, LossWeights, collision_loss, contact_loss, recon_loss, total_loss
from .meshes import TriMesh, contact_shift, detect_contact_pairs, extract_posed_meshes, mesh_to_gaussians
from .metrics import chamfer_cm, collision_ratio, contact_f1, icp_align, root_align
from .optimizer import OptTrace, OptimConfig, OptimTargets, ParamGroups, run_hoi_optimization
from .render import RenderOutput, project_gaussian, render, render_backward, render_with_grad
from .scene import (
    BodyModel,
    GaussianSet,
    HumanState,
    ObjectState,
    Scene,
    apply_object_transform,
    forward_kinematics,
    pose_human,
    select_contact_anchors,
)
from .synth import SynthSpec, synth_scene

__version__ = "0.1.0"

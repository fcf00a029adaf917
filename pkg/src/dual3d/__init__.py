"""Deterministic numerical core of a dual-mode multi-view text-to-3D pipeline.

The package is organized around the stages of the generation pipeline:

- :mod:`dual3d.field` -- tri-plane SDF/color fields and analytic SDF oracles
- :mod:`dual3d.cameras` -- pinhole cameras, rays, Plucker encoding, view rigs
- :mod:`dual3d.renderer` -- occupancy-grid accelerated NeuS volume rendering
- :mod:`dual3d.diffusion` -- noise schedules, DDIM stepping, mode-toggled sampling
- :mod:`dual3d.network` -- toy dual-mode denoising network (forward only)
- :mod:`dual3d.mesh` -- marching-cubes extraction and UV atlas construction
- :mod:`dual3d.texture` -- software rasterizer and texture refinement
- :mod:`dual3d.metrics` -- embedding-based similarity / retrieval metrics
- :mod:`dual3d.pipeline` -- end-to-end orchestration with manifests
- :mod:`dual3d.report` -- matplotlib figure reports for completed runs
"""

__version__ = "0.1.0"

from dual3d.field import (
    AnalyticSdf,
    FieldMlp,
    FieldSample,
    TriPlaneField,
    eikonal_loss,
    field_eval,
    field_gradient,
    minimal_surface_loss,
    sample_triplane,
)
from dual3d.cameras import (
    Camera,
    PluckerRay,
    Ray,
    eval_camera_rig,
    generate_rays,
    latent_rays,
    plucker_encode,
)
from dual3d.renderer import (
    OccupancyGrid,
    RenderConfig,
    RenderOutput,
    build_occupancy_grid,
    composite,
    march_ray,
    neus_alpha,
    render_image,
    upsample_points,
)
from dual3d.diffusion import (
    DdimPlan,
    GaussianAnalyticDenoiser,
    Mode,
    NoiseSchedule,
    ToggleSchedule,
    add_noise,
    cfg_combine,
    cosine_alpha_bar,
    ddim_step,
    sample,
    toggle_mode,
)
from dual3d.mesh import TriMesh, build_uv_atlas, marching_cubes
from dual3d.texture import (
    FragmentBuffer,
    TextureAtlas,
    anneal_t,
    rasterize,
    refine_texture,
    shade,
    texture_grad,
)
from dual3d.metrics import EmbeddingSet, clip_similarity, r_precision

"""Relightable text-to-3D generation at desk scale.

The pipeline runs entirely on CPU from procedurally generated training data:
synthetic multi-view albedo/normal rendering, a joint multi-view multi-domain
denoising diffusion model, transformer-based triplane reconstruction,
score-distillation refinement (volume and tet-mesh stages), and split-sum PBR
material optimization with relighting.
"""

__version__ = "0.1.0"

"""Audio-synchronized image animation at desk scale.

Latent video diffusion with first-frame lookups and segmented audio
conditioning, a contrastive audio-video sync classifier, the
RelSync/AlignSync metric family, and an automatic curation pipeline,
all exercised on a procedurally synthesized corpus.
"""

__version__ = "0.1.0"

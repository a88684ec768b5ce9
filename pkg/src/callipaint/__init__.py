"""Glyph diffusion with mask-conditioned inpainting.

Library surface: corpus building (``corpus``), schedule and sampler math
(``diffusion``), the conditional denoiser (``denoiser``), the resampling
inpainting scheduler (``repaint``), the evaluation suite (``evaluation``,
``survey``), an HTTP service (``service``), and a CLI (``cli``).
"""

__version__ = "0.1.0"

"""Desk-scale diffusion-transformer workbench.

A toy DiT whose hidden states can be traced, whose massive activations can
be detected and disrupted, and whose sampling can be steered by detail
guidance, classifier-free guidance, and their combination.
"""

__version__ = "0.1.0"

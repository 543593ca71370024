"""Desk-scale multimodal crack segmentation.

Mask-guided state-space scanning over patch tokens, dynamic multi-kernel
convolution, and spatial/frequency dual-domain fusion, all on a small numpy
autodiff substrate. See README for the CLI.
"""

__version__ = "0.1.0"

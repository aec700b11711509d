"""Bridge from official RWKV-4 checkpoints to the accelerator-model toolchain.

Reads a published ``.pth`` state dict, emits the float interchange directory
the quantizer consumes, fake-quantizes baselines for comparison studies, and
scores models for perplexity/accuracy by driving the ``hfrwkv`` CLI as a
subprocess. Nothing here imports the accelerator package: the interchange
files and the CLI are the only contact surface.
"""

from .checkpoint import convert_checkpoint, OFFICIAL_TO_SCHEMA
from .evalharness import eval_quality, score_sequence

__all__ = ["convert_checkpoint", "OFFICIAL_TO_SCHEMA", "eval_quality",
           "score_sequence"]
__version__ = "0.1.0"

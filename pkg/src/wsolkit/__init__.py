"""
wsolkit - weakly supervised object localization

Trains a small classification network from image-level labels, mines class-specific
proposals with contrast and activation cues, selects instances by multiple instance
learning, refines them by segmentation and adapts the result into a proposal detector.
"""

__version__ = "0.3.0"
__author__ = "ch1kim0n1"
__email__ = "vxk230059@utdallas.edu"

from .models import BoundingBox, Dataset, Detection, LabeledImage, ScoredProposal
from .pipeline import execute_stage

__all__ = [
    "BoundingBox",
    "Dataset",
    "Detection",
    "LabeledImage",
    "ScoredProposal",
    "execute_stage",
]

"""Vessel keypoint detection, description, matching and registration."""

__version__ = "0.1.0"

from .types import (DescriptorMap, FeaturePyramid, Homography, InvariantError, KeypointEmbedding,
                    KeypointSet, ScalarMap, Violation, validate)

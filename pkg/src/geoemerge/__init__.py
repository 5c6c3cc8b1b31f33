"""geoemerge: emergent 3D awareness from privileged geometric supervision.

A library + CLI for testing, at desk scale, whether an RGB-only encoder
internalizes 3D structure when trained with privileged geometric losses
(dense uncertainty-weighted depth, cross-view depth consistency, and a
frozen scene-level teacher), all of which detach at inference.
"""

__version__ = "0.1.0"

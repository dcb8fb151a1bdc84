"""Learning-based warp correction for image compositing.

Foreground layers are placed into background images through homographies
parameterized in the sl(3) Lie algebra; a stack of convolutional warp
predictors, trained adversarially against real scene composites, refines
an initial placement through iterative corrections.
"""

__version__ = "0.1.0"

"""PatchMatch multi-view stereo with superpixel plane priors and textureness weighting."""

__version__ = "0.1.0"

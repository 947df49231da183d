"""Multi-view stereo with dilated PatchMatch, plane hypothesis inference and fusion."""

__version__ = "0.1.0"

"""Exception types shared across the package."""


class GpoError(Exception):
    """Base class for registration-engine errors."""


class ImageFormatError(GpoError):
    """Raster file decodes but is not a supported pixel layout."""


class DegenerateInputError(GpoError):
    """Input configuration is rank-deficient (too few / collinear points)."""


class NoConsensusError(GpoError):
    """RANSAC found no model reaching the inlier quorum."""


class DegeneratePointError(GpoError):
    """Point maps to the plane at infinity (homogeneous w ~ 0)."""


class ConsistencyError(GpoError):
    """Stale neighbor index or mismatched array sizes between pipeline stages."""


class NumericalFailureError(GpoError):
    """Non-finite loss or gradient during optimization.

    Carries the 1-based iteration index and the ids of the offending nodes.
    """

    def __init__(self, message: str, iteration: int, node_ids=()):
        super().__init__(message)
        self.iteration = iteration
        self.node_ids = tuple(node_ids)


class GenerationError(GpoError):
    """Synthetic pair generation failed (e.g. non-invertible deformation)."""

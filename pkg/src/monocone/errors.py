"""Exception types raised by the monocone library."""


class MonoconeError(Exception):
    """Base class for all monocone-specific errors."""


class NonPositiveDepth(MonoconeError):
    """A point to be projected lies at or behind the camera plane."""


class DegenerateConfiguration(MonoconeError):
    """A cross-ratio denominator distance fell below the degeneracy threshold."""


class InsufficientPoints(MonoconeError):
    """Fewer correspondences than the solver's minimum."""


class BehindCamera(MonoconeError):
    """A converged pose places model points at non-positive depth."""


class NoConvergence(MonoconeError):
    """Pose optimization produced a non-finite or unusable result."""


class NoConsensus(MonoconeError):
    """No RANSAC hypothesis reached the required inlier count."""


class DegenerateBox(MonoconeError):
    """A bounding box shrank below the minimum usable size."""


class EmptyDataset(MonoconeError):
    """Training requested on a dataset with no samples."""


class RankDeficient(MonoconeError):
    """Least-squares fit attempted on rank-deficient data."""


class OracleProviderRejected(MonoconeError):
    """An oracle keypoint provider was passed where a trained model is required."""

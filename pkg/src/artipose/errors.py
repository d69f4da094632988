"""Exception types shared across the package."""


class ArtiposeError(Exception):
    """Base class for all package-specific failures."""


class InvalidIntrinsicsError(ArtiposeError):
    """Camera intrinsics are unusable (zero focal length, principal point off-image)."""


class InsufficientDataError(ArtiposeError):
    """An operation was given fewer samples than it mathematically requires."""


class DegenerateConfigurationError(ArtiposeError):
    """The input geometry does not determine a unique solution (rank-deficient system)."""


class CheiralityAmbiguousError(ArtiposeError):
    """No pose candidate places a clear majority of points in front of both views."""


class NoParallaxError(ArtiposeError):
    """Back-projected rays are (near-)parallel; triangulation is undefined."""


class FlowFormatError(ArtiposeError):
    """A flow file does not carry the expected sentinel/header."""


class PayloadLengthError(ArtiposeError):
    """A binary payload is shorter or longer than its header/sidecar promises."""


class EmptyRegionError(ArtiposeError):
    """A reduction was requested over a region containing no usable pixels."""


class PartsNotFoundError(ArtiposeError):
    """Sequential RANSAC could not find consensus for every expected part."""

    def __init__(self, expected: int, found: int):
        super().__init__(f"found consensus for {found} of {expected} expected parts")
        self.expected = expected
        self.found = found


class FrameTagError(ArtiposeError):
    """Coordinate-frame tags do not chain (e.g. composing world->model with model->camera)."""


class InsufficientSupportError(ArtiposeError):
    """Too few inliers to optimize a pose."""


class NoOverlapError(ArtiposeError):
    """No point projects into the image; a photometric objective would be empty."""


class MonotonicityError(ArtiposeError):
    """An iterative refinement increased its objective; indicates a bug, never expected.

    Instances are counted so a test run can assert that no refinement ever
    violated its monotonicity contract.
    """

    count = 0

    def __init__(self, *args):
        super().__init__(*args)
        MonotonicityError.count += 1


class ConfigError(ArtiposeError):
    """A pipeline/service configuration is structurally invalid."""

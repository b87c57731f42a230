"""Exception hierarchy shared across the toolkit."""


class SgsynthError(Exception):
    """Base class for all toolkit errors."""


class ConfigurationError(SgsynthError):
    """Bad or inconsistent user-supplied configuration or file content."""


class PartitionCoverageError(ConfigurationError):
    """An output point is not covered by any label region."""


class ImageConditionViolated(SgsynthError):
    """The model-matching linear systems have no solution for the given P."""

    def __init__(self, which, residual):
        self.which = which
        self.residual = residual
        super().__init__(f"image condition violated for {which}: relative residual {residual:.3e}")


class UnsupportedCovariance(SgsynthError):
    """Non-diagonal abstract noise covariance; exact kernels need a diagonal one."""


class KernelConsistencyError(SgsynthError):
    """Transition-kernel rows failed a mass-conservation check."""


class CertificateInvalid(SgsynthError):
    """A relation certificate failed structural validation."""


class InfeasibleNoiseMismatch(SgsynthError):
    """delta = 0 demands matching noise matrices; the mismatch makes the noise term unbounded."""


class EmptyInteriorError(SgsynthError):
    """Shifted input polytope has empty interior; shrink the abstract input set or grid."""


class NoInitialAbstractState(SgsynthError):
    """Initial concrete state is not covered by the relation at this epsilon."""


class LiftingUnavailable(SgsynthError):
    """Noise recovery needs a full-column-rank noise matrix."""


class ArtifactMismatchError(SgsynthError):
    """An artifact references an input whose hash no longer matches."""


class HorizonExhausted(SgsynthError):
    """Controller queried past the synthesis horizon."""

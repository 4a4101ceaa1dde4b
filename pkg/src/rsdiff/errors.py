"""Exception hierarchy shared across the package."""


class RSDiffError(Exception):
    """Base class for all package errors."""


class ModelError(RSDiffError):
    pass


class NonConservativeQ(ModelError):
    pass


class DegenerateDiffusion(ModelError):
    pass


class NegativeRate(ModelError):
    pass


class NonFiniteCoefficient(ModelError):
    pass


class ConfigError(ModelError):
    """Malformed or unsupported model configuration."""


class DimensionMismatch(RSDiffError):
    pass


class NotZMatrix(RSDiffError):
    pass


class SingularSystem(RSDiffError):
    pass


class NonFiniteBound(RSDiffError):
    pass


class BoundViolated(RSDiffError):
    """Observed switching intensity exceeded the dominating rate used for thinning."""


class Exploded(RSDiffError):
    def __init__(self, time, x):
        super().__init__(f"path left the explosion radius at t={time!r}")
        self.time = time
        self.x = x


class DegenerateWeights(RSDiffError):
    pass


class AllPathsExploded(RSDiffError):
    pass


class GridMismatch(RSDiffError):
    pass


class NullSpaceDimensionAmbiguous(RSDiffError):
    def __init__(self, singular_values):
        super().__init__(
            "two smallest singular values are not separated: "
            f"{singular_values[0]:.3e}, {singular_values[1]:.3e}"
        )
        self.singular_values = singular_values

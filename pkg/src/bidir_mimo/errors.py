"""Exception types raised by the package."""


class ConfigurationError(ValueError):
    """Invalid topology, optimizer, training or experiment parameters."""


class ShapeError(ValueError):
    """Array dimensions do not match the topology."""


class InfeasiblePowerError(ArithmeticError):
    """A norm target cannot be reached on the positive-definite multiplier region.

    Attributes
    ----------
    supremum : float
        Largest aggregate squared norm reachable as the multiplier
        approaches the smallest admissible value.
    target : float
        The requested aggregate squared norm.
    """

    def __init__(self, supremum, target):
        self.supremum = float(supremum)
        self.target = float(target)
        super().__init__(
            f"power target {self.target:.6g} exceeds reachable supremum "
            f"{self.supremum:.6g}")


class BiasDegenerateError(ArithmeticError):
    """A THP bias factor is too small to divide the feedback taps by."""

"""Exception types shared across the package."""

from __future__ import annotations


class RoadflowError(Exception):
    """Base class for all package-specific failures."""


class CycleDetected(RoadflowError):
    """The directed network contains a cycle; one witness cycle is attached."""

    def __init__(self, cycle):
        self.cycle = list(cycle)
        super().__init__(f"network contains a directed cycle: {self.cycle}")


class Disconnected(RoadflowError):
    """The network is not connected as an undirected graph."""


class SplitRowInvalid(RoadflowError):
    """A turning-fraction row is negative, does not sum to one, or routes
    flow toward a node that cannot reach the commodity destination."""


class FixedPointDiverged(RoadflowError):
    """Picard iteration for the characteristic displacement did not settle.

    Usually means the requested time window is too large; solve on a
    shorter window.
    """


class CflViolated(RoadflowError):
    """Time step too large for the observed speeds even after halving."""


class HorizonExceeded(RoadflowError):
    """A queried trajectory leaves the simulated time range."""


class NoPath(RoadflowError):
    """No simple path exists between the requested nodes."""


class PathCapExceeded(RoadflowError):
    """Simple-path enumeration hit the configured cap."""


class InfeasibleDelay(RoadflowError):
    """A delay choice lies outside a vehicle's permitted window."""


class InstanceTooLarge(RoadflowError):
    """Exhaustive search refused: the joint choice space is too big."""


class PlaintextOutOfRange(RoadflowError):
    """Plaintext does not fit the additive group of the key."""


class KeyMismatch(RoadflowError):
    """Ciphertexts from different keypairs were combined."""


class DimensionMismatch(RoadflowError):
    """Cipher matrices of different shapes were combined."""


class PrimeGenerationFailed(RoadflowError):
    """Could not find suitable primes within the attempt budget."""


class InadmissibleVelocityField(RoadflowError):
    """A velocity field violates its bound or smoothness constraints."""


class SchemaError(RoadflowError):
    """A scenario document does not match the expected schema."""


class ComputeError(RoadflowError):
    """A scenario run failed inside a module; carries the original context."""

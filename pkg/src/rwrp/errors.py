"""Exception hierarchy shared by every rwrp module."""

from __future__ import annotations


class RwrpError(Exception):
    """Base class for all library errors."""


# lattice
class DuplicateStep(RwrpError):
    pass


class ProbsNotNormalized(RwrpError):
    pass


class TooFewSteps(RwrpError):
    pass


class DimUnsupported(RwrpError):
    pass


class DirectionOutsideCone(RwrpError):
    pass


class BudgetExceeded(RwrpError):
    pass


class WidthTooSmall(RwrpError):
    pass


class LevelBelowAnchor(RwrpError):
    pass


class StepNotInR(RwrpError):
    pass


# energy
class NegativePotentialWithLoops(RwrpError):
    pass


class BoxTooSmall(RwrpError):
    pass


class DivergentGreens(RwrpError):
    pass


class TerminalUnreachable(RwrpError):
    pass


class Explosion(RwrpError):
    pass


# busemann
class NotInRelativeInterior(RwrpError):
    pass


class LambdaSignViolation(RwrpError):
    pass


class EmptySlab(RwrpError):
    pass


class DisconnectedWindow(RwrpError):
    pass


class PathDependence(RwrpError):
    pass


class AlphaOutOfRange(RwrpError):
    pass


class ParamOutOfRange(RwrpError):
    pass


class NoZeroLoop(RwrpError):
    pass


class NegativePotential(RwrpError):
    pass


class RankDeficientProbes(RwrpError):
    pass


# gibbs
class RecoveryViolated(RwrpError):
    pass


class LeftCocycleDomain(RwrpError):
    pass


class EmptyArgmin(RwrpError):
    pass


class InfiniteClassInBox(RwrpError):
    pass


class GridOutsideU(RwrpError):
    pass


# shape
class InsufficientInteriorData(RwrpError):
    pass


class ConcavityViolatedAtScale(RwrpError):
    pass


class EmptyFacetAtTol(RwrpError):
    pass


class GridMismatch(RwrpError):
    pass


# harness
class ConfigInvalid(RwrpError):
    pass


class ModuleError(RwrpError):
    pass

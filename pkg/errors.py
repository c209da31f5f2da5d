"""
Exception hierarchy for stochastic computation graphs.

Every error raised by the library derives from SCGError so callers (the CLI,
the Flask app) can catch one type at the boundary.
"""


class SCGError(Exception):
    """Base class for all library errors."""


# Graph model

class GraphError(SCGError):
    pass


class CycleError(GraphError):
    def __init__(self, edge):
        self.edge = edge
        super().__init__(f"cycle detected through edge {edge[0]} -> {edge[1]}")


class ShapeError(GraphError, ValueError):
    pass


class CostShapeError(ShapeError):
    pass


class UnknownNode(GraphError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "unknown node"


class IncompleteTrace(GraphError):
    pass


class GraphLoadError(GraphError):
    pass


# Tensor kernel

class NonFiniteError(SCGError, FloatingPointError):
    pass


class SecondOrderUnsupported(SCGError):
    pass


class UnknownOp(SCGError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "unknown op"


# Distributions

class DistributionError(SCGError):
    pass


class InvalidParam(DistributionError, ValueError):
    pass


class OutOfSupport(DistributionError, ValueError):
    pass


class NotReparameterizable(DistributionError):
    pass


class UnknownDistribution(DistributionError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "unknown distribution"


# Estimator

class EstimatorError(SCGError):
    pass


class BaselineScopeError(EstimatorError):
    pass


class ConditionViolation(EstimatorError):
    pass


class PositiveCostError(EstimatorError):
    pass


class NonFiniteSupportError(EstimatorError):
    pass


class DirectCostInfluenceError(EstimatorError):
    pass


# Oracle

class OracleError(SCGError):
    pass


class SupportTooLarge(OracleError):
    pass


class UnsupportedContinuous(OracleError):
    pass


# Examples / CLI

class UnknownExample(SCGError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "unknown example"

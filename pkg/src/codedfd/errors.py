"""Exception types raised across the package."""


class CodedFDError(Exception):
    pass


# codegen
class NonPrimitivePolynomial(CodedFDError, ValueError):
    pass


class UnsupportedDegree(CodedFDError, ValueError):
    pass


class DegreeMismatch(CodedFDError, ValueError):
    pass


class LengthMismatch(CodedFDError, ValueError):
    pass


class Infeasible(CodedFDError, ValueError):
    pass


class StrategyInfeasible(CodedFDError, ValueError):
    pass


# tensor-nn
class ShapeMismatch(CodedFDError, ValueError):
    pass


class EmptyDataset(CodedFDError, ValueError):
    pass


# dropout
class MaskShapeMismatch(CodedFDError, ValueError):
    pass


# fedcore
class EmptyCohort(CodedFDError, ValueError):
    pass


class ModeMismatch(CodedFDError, ValueError):
    pass


# lr-adapt
class EmptyHistory(CodedFDError, ValueError):
    pass


class NoCandidateReachedTarget(CodedFDError, RuntimeError):
    def __init__(self, message, log=None):
        super().__init__(message)
        self.log = log or []


# data-io
class BadMagic(CodedFDError, ValueError):
    pass


class CountMismatch(CodedFDError, ValueError):
    pass


class TruncatedFile(CodedFDError, ValueError):
    pass


class TooFewSamples(CodedFDError, ValueError):
    pass


# cli
class ConfigError(CodedFDError, ValueError):
    pass

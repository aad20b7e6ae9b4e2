"""Exception hierarchy shared by all modules."""


class KoopmanEmpcError(Exception):
    """Base class for every error raised by this package."""


class DimensionMismatch(KoopmanEmpcError, ValueError):
    pass


class ConstantChannel(KoopmanEmpcError, ValueError):
    def __init__(self, channel):
        super().__init__(f"channel {channel} has zero variance")
        self.channel = channel


class EmptyData(KoopmanEmpcError, ValueError):
    pass


class ParseError(KoopmanEmpcError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class MissingColumn(KoopmanEmpcError, ValueError):
    pass


class NonFiniteState(KoopmanEmpcError, ArithmeticError):
    pass


class IllConditioned(KoopmanEmpcError, ArithmeticError):
    pass


class RankDeficient(KoopmanEmpcError, ArithmeticError):
    pass


class NonFiniteLoss(KoopmanEmpcError, ArithmeticError):
    def __init__(self, epoch=None):
        msg = "loss became non-finite"
        if epoch is not None:
            msg += f" at epoch {epoch}"
        super().__init__(msg)
        self.epoch = epoch


class DivergedLoss(KoopmanEmpcError, ArithmeticError):
    pass


class NoAdmissibleDimension(KoopmanEmpcError, RuntimeError):
    pass


class WrongVariant(KoopmanEmpcError, ValueError):
    pass


class Undetectable(KoopmanEmpcError, ValueError):
    pass


class SingularInnovation(KoopmanEmpcError, ArithmeticError):
    pass


class NoConvergence(KoopmanEmpcError, RuntimeError):
    pass


class ScalerMissing(KoopmanEmpcError, ValueError):
    pass


class MaxIterations(KoopmanEmpcError, RuntimeError):
    def __init__(self, solution):
        super().__init__("QP solver hit the iteration limit")
        self.solution = solution


class NumericalFailure(KoopmanEmpcError, ArithmeticError):
    pass


class Infeasible(KoopmanEmpcError, RuntimeError):
    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class SolverFailure(KoopmanEmpcError, RuntimeError):
    def __init__(self, step, cause):
        super().__init__(f"controller failed at step {step}: {cause}")
        self.step = step
        self.cause = cause


class PlantDiverged(KoopmanEmpcError, RuntimeError):
    pass


class ScenarioMismatch(KoopmanEmpcError, ValueError):
    pass


class ConfigError(KoopmanEmpcError, ValueError):
    pass

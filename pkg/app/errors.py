from typing import Optional


class TwinError(Exception):
    """Base class for every error raised by the twin services.

    ``exit_code`` is what the CLI returns when the error reaches it.
    """

    exit_code = 1


class ConfigError(TwinError):
    """Invalid configuration or parameter values"""


class ShapeError(TwinError, ValueError):
    """Vector/matrix dimensions do not line up"""


class InvalidInputError(TwinError, ValueError):
    """Non-finite or otherwise unusable numeric input"""


class ContractError(TwinError):
    """A call sequence contract was broken (e.g. stale forward tape)"""


class OracleError(TwinError):
    """The finite-difference oracle hit a non-finite evaluation"""


class DataError(TwinError):
    """Dataset content is missing or unusable"""


class ParseError(DataError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class AlignmentError(DataError):
    """Modalities are not aligned to the same timestamps"""


class EmptyDatasetError(DataError):
    """The data section holds no rows"""


class EstimationError(TwinError):
    """Constant estimation had no usable samples"""


class UndefinedNormalizationError(TwinError):
    """Ground truth has zero variance, so NMSE is undefined"""


class DivergenceError(TwinError):
    exit_code = 2

    def __init__(self, message: str, round: Optional[int] = None,
                 area: Optional[int] = None, step: Optional[int] = None,
                 loss: Optional[float] = None):
        self.round = round
        self.area = area
        self.step = step
        self.loss = loss
        super().__init__(message)

    def to_dict(self):
        loss = self.loss
        if loss is not None and loss != loss:
            loss = "nan"
        elif loss is not None and loss in (float("inf"), float("-inf")):
            loss = str(loss)
        return {
            "round": self.round,
            "area": self.area,
            "step": self.step,
            "loss": loss,
            "message": str(self),
        }


class ReportIOError(TwinError):
    exit_code = 3

    def __init__(self, message: str, path: Optional[str] = None):
        self.path = path
        if path is not None:
            message = f"{message} ({path})"
        super().__init__(message)

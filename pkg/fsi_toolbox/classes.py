import logging
from enum import Enum, IntEnum
from typing import Dict


class RegionTag(IntEnum):
    FLUID = 0
    SOLID = 1


class BoundaryTag(IntEnum):
    OUTER = 10
    INTERFACE = 11


class SolidShape(Enum):
    DISK = "disk"
    ELLIPSE = "ellipse"

    @staticmethod
    def from_string(label: str):
        """Creates an instance of this class from a string. Provides support
        for aliases.

        Parameters
        ----------
        label : str

        Returns
        -------
        SolidShape
        """
        _ALIASES = {
            SolidShape.DISK: ("DISK", "CIRCLE"),
            SolidShape.ELLIPSE: ("ELLIPSE", "ELLIPTIC"),
        }
        for enum_type in _ALIASES.keys():
            if label.upper() in _ALIASES[enum_type]:
                return enum_type
        else:
            raise ValueError(f"{label} is not a valid solid shape")


class ModeFamily(Enum):
    TRIGONOMETRIC = "trigonometric"
    TANGENTIAL = "tangential"

    @staticmethod
    def from_string(label: str):
        _ALIASES = {
            ModeFamily.TRIGONOMETRIC: ("TRIGONOMETRIC", "TRIG", "FOURIER"),
            ModeFamily.TANGENTIAL: ("TANGENTIAL", "SPIN"),
        }
        for enum_type in _ALIASES.keys():
            if label.upper() in _ALIASES[enum_type]:
                return enum_type
        else:
            raise ValueError(f"{label} is not a valid control mode family")


class InitialCondition(Enum):
    RANDOM = "random"
    EIGENMODE = "eigenmode"

    @staticmethod
    def from_string(label: str):
        _ALIASES = {
            InitialCondition.RANDOM: ("RANDOM", "RANDOM-COMPATIBLE"),
            InitialCondition.EIGENMODE: ("EIGENMODE", "MODE", "EIGENVECTOR"),
        }
        for enum_type in _ALIASES.keys():
            if label.upper() in _ALIASES[enum_type]:
                return enum_type
        else:
            raise ValueError(f"{label} is not a valid initial condition")


class LoopMode(Enum):
    OPEN = "open"
    CLOSED = "closed"


class FeedbackScheme(Enum):
    LAGGED = "lagged"
    IMPLICIT = "implicit"

    @staticmethod
    def from_string(label: str):
        try:
            return FeedbackScheme(label.lower())
        except ValueError:
            raise ValueError(f"{label} is not a valid feedback scheme")


class ConfigError(ValueError):
    """Invalid experiment record. The message names the offending field."""

    def __init__(self, field: str, message: str, line: int = None):
        self.field = field
        self.reason = message
        self.line = line
        location = f" (line {line})" if line is not None else ""
        super().__init__(f"{field}{location}: {message}")


class GapViolation(ValueError):
    pass


class CentroidError(ValueError):
    pass


class FluxViolation(ValueError):
    pass


class ShiftOnSpectrum(ValueError):
    pass


class LambdaOnSpectrum(ValueError):
    pass


class InsufficientSpectrum(ValueError):
    pass


class GridMismatch(ValueError):
    pass


class DegenerateFit(ValueError):
    pass


class IncompatibleState(ValueError):
    pass


class MeshingFailure(RuntimeError):
    pass


class InfSupFailure(RuntimeError):
    pass


class SolverDivergence(RuntimeError):
    pass


class NonConvergence(RuntimeError):
    pass


class RiccatiNoSolution(RuntimeError):
    pass


class FixedPointDivergence(RuntimeError):
    pass


class StageError(RuntimeError):
    """Raised by the experiment driver when a pipeline stage fails."""

    def __init__(self, stage: str, error: Exception):
        self.stage = stage
        self.error = error
        super().__init__(f"[{stage}] {type(error).__name__}: {error}")


class StageContextFilter(logging.Filter):
    """Stamps the current pipeline stage on records and counts warnings."""

    curr_stage = "-"

    def __init__(self):
        super().__init__()
        self.warnings: Dict[str, int] = {}

    def reset(self):
        self.curr_stage = "-"
        self.warnings = {}

    def filter(self, record: logging.LogRecord) -> bool:
        record.stage = self.curr_stage
        if record.levelno >= logging.WARNING:
            stage = self.curr_stage
            self.warnings[stage] = self.warnings.get(stage, 0) + 1
        return True


class StageFormatter(logging.Formatter):

    dim = "\x1b[2m"
    green = "\x1b[32m"
    yellow = "\x1b[33;20m"
    red = "\x1b[31;20m"
    bold_red = "\x1b[31;1m"
    reset = "\x1b[0m"
    layout = "%(levelname).1s [%(stage)s] %(message)s"

    FORMATS = {
        logging.DEBUG: dim + layout + reset,
        logging.INFO: green + "[%(stage)s]" + reset + " %(message)s",
        logging.WARNING: yellow + layout + reset,
        logging.ERROR: red + layout + reset,
        logging.CRITICAL: bold_red + layout + reset,
    }

    def format(self, record):
        if not hasattr(record, "stage"):
            record.stage = "-"
        formatter = logging.Formatter(self.FORMATS.get(record.levelno, self.layout))
        return formatter.format(record)

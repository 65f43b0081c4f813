"""
Exception hierarchy shared by every normsynth module

Each class carries the exit code the batch CLI reports for it.
"""
from datetime import datetime
from typing import Any, Dict, Optional

import pytz


class NormSynthError(Exception):
    """Base class for all library errors"""

    exit_code = 1

    def to_response(self) -> Dict[str, Any]:
        """Machine-readable error payload written to stderr by the CLI"""
        return {
            'success': False,
            'error': str(self),
            'error_type': type(self).__name__,
            'exit_code': self.exit_code,
            'timestamp': datetime.now(pytz.UTC).isoformat()
        }


class ContractError(NormSynthError, ValueError):
    """Inputs violate a documented precondition"""

    exit_code = 2


class DimensionMismatchError(ContractError):
    pass


class EmptyMaskError(ContractError):
    pass


class NotScalarVolumeError(ContractError):
    pass


class SchemaError(ContractError):
    """Model or manifest file does not match the expected schema/version"""
    pass


class NumericalError(NormSynthError, ArithmeticError):
    """A numerical procedure could not produce a valid result"""

    exit_code = 3


class DegenerateFitError(NumericalError):
    pass


class NoPeakError(NumericalError):
    pass


class ConvergenceError(NumericalError):
    """Iterative fit stopped at max iterations without meeting its tolerance"""

    def __init__(self, message: str, last_objective: Optional[float] = None):
        super().__init__(message)
        self.last_objective = last_objective


class VolumeIOError(NormSynthError, OSError):
    """Reading or writing a file failed"""

    exit_code = 4


class VolumeNotFoundError(VolumeIOError):
    pass


class MalformedHeaderError(VolumeIOError):
    pass

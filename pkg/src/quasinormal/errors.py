"""Exception types shared by every module.

Each class carries the process exit code the CLI maps it to.
"""


class QuasiNormalError(Exception):
    exit_code = 1


class ConfigError(QuasiNormalError):
    exit_code = 2

    def __init__(self, message, line=None, key=None):
        self.line = line
        self.key = key
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DataError(QuasiNormalError):
    exit_code = 3


class DimensionMismatch(DataError, ValueError):
    pass


class AllMasked(DataError):
    def __init__(self, voxel):
        self.voxel = voxel
        super().__init__(f"voxel {voxel} is masked in every image")


class SpecInvalid(DataError, ValueError):
    pass


class ParseFailure(DataError):
    pass


class ManifestError(DataError):
    def __init__(self, message, path=None):
        self.path = path
        super().__init__(message)


class NumericalFailure(QuasiNormalError):
    exit_code = 4


class RankDeficient(NumericalFailure):
    pass


class NonFinite(NumericalFailure):
    pass


class SvdFailure(NumericalFailure):
    pass


class ProcessFailure(QuasiNormalError):
    exit_code = 5

    def __init__(self, message, returncode=None):
        self.returncode = returncode
        super().__init__(message)


class StageError(QuasiNormalError):
    """Wraps an error raised inside a pipeline stage or iteration."""

    def __init__(self, where, cause):
        self.where = where
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 1)
        super().__init__(f"{where}: {cause}")

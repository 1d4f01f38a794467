"""Exception hierarchy shared by every module."""


class SdpLabError(Exception):
    """Base class for all errors raised by sdplab."""


class ShapeError(SdpLabError, ValueError):
    pass


class NonFiniteError(SdpLabError, ValueError):
    pass


class ConfigError(SdpLabError, ValueError):
    pass


class DatasetError(SdpLabError):
    pass


class DatasetMissingError(DatasetError, FileNotFoundError):
    pass


class DatasetParseError(DatasetError, ValueError):
    pass


class DatasetEmptyError(DatasetError, ValueError):
    pass


class CheckpointError(SdpLabError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class StaleTraceError(SdpLabError, RuntimeError):
    pass


class FrozenNetworkError(SdpLabError, RuntimeError):
    pass


class DivergenceError(SdpLabError, RuntimeError):
    pass


class ReportError(SdpLabError, ValueError):
    pass

"""
Exception types shared by every module.
Each class carries the process exit code the command line uses for it.
"""


class MuxError(Exception):
    """Base class for all errors raised by the multiplexing toolkit"""
    exit_code = 1


class ConfigError(MuxError):
    """Invalid configuration, or a config that disagrees with stored artifacts"""
    exit_code = 2


class StorageError(MuxError):
    """File could not be read or written, or its contents are not valid"""
    exit_code = 3


class NumericError(MuxError):
    """Non-finite values, diverging losses or degenerate normalisation"""
    exit_code = 4


class ShapeError(MuxError, ValueError):
    """Tensor shapes or dimensions do not agree"""
    exit_code = 5


class TapeError(MuxError):
    """A loss was not produced under the gradient tape it is differentiated with"""
    exit_code = 6

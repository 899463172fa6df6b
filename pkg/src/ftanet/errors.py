"""Exception hierarchy.

Everything deriving from :class:`InputError` is caused by bad user input
(files, configs, shapes) and maps to exit code 2 on the command line.
"""


class InputError(Exception):
    """Base class for errors caused by invalid input."""


class AudioReadError(InputError):
    """The file could not be opened or is not a RIFF/WAVE container."""


class UnsupportedAudioError(InputError):
    """The WAV encoding, bit depth or channel count is not supported."""


class EmptyAudioError(InputError):
    """The audio holds zero samples."""


class SampleRateError(InputError):
    """Audio is at a sample rate the operation does not accept."""


class ShapeError(InputError, ValueError):
    """Tensor shapes are inconsistent for the requested operation."""


class CorruptFileError(InputError):
    """A binary file has a bad magic number or an inconsistent length."""


class UnsupportedVersionError(InputError):
    """A binary file declares a format version this code cannot read."""


class ContourFormatError(InputError):
    """A melody contour file could not be parsed."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ConfigError(InputError):
    """A configuration file holds unknown keys or invalid values."""


class TrainingError(RuntimeError):
    """Training diverged or was given an unusable dataset."""

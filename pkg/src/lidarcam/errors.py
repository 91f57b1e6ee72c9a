"""Exception types shared across the package."""


class CalibrationError(Exception):
    """Base class for calibration file problems."""


class MissingKey(CalibrationError):
    """A required calibration key is absent from the file."""

    def __init__(self, name: str):
        super().__init__(f"calibration key not found: {name}")
        self.name = name


class MalformedNumber(CalibrationError):
    """A calibration value failed to parse as a float."""

    def __init__(self, line: int, column: int, detail: str = ""):
        msg = f"malformed number at line {line}, column {column}"
        if detail:
            msg = f"{msg}: {detail}"
        super().__init__(msg)
        self.line = line
        self.column = column


class VelodyneFormatError(Exception):
    """Point file size is not a whole number of 16-byte records."""


class ZeroNormPoint(ValueError):
    """Spherical projection of the zero vector is undefined."""


class EmptyCloud(ValueError):
    """No points available to build projection maps from."""


class DimensionMismatch(ValueError):
    """Parameter or feature widths do not agree."""


class OversizeImage(ValueError):
    """Input image is larger than the padding target."""


class ConfigError(Exception):
    """Bad pipeline configuration value or file."""

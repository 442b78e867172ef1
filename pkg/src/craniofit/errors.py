"""Exception types shared across the package.

The CLI maps these onto exit codes: config and parse problems exit 2,
numerical failures exit 3, contract violations exit 4.
"""


class CraniofitError(Exception):
    pass


class GeometryError(CraniofitError):
    pass


class ModelError(CraniofitError):
    pass


class RenderError(CraniofitError):
    pass


class FitError(CraniofitError):
    pass


class SuperimposeError(CraniofitError):
    pass


class InpaintError(CraniofitError):
    pass


class ConfigError(CraniofitError):
    """Bad configuration or unparseable input file."""


class NumericalError(CraniofitError):
    """A computation produced non-finite values."""


class ContractViolation(CraniofitError):
    """A pluggable component broke its interface contract."""

"""Exception types. Every error carries a stable ``category`` string used by the CLI."""


class MultiFPFHIError(Exception):
    category = "error"


class ParameterError(MultiFPFHIError, ValueError):
    category = "parameter"


class LayoutMismatchError(ParameterError):
    category = "layout_mismatch"


class DegenerateInputError(ParameterError):
    category = "degenerate_input"


class FormatError(MultiFPFHIError):
    category = "format"


class ConfigError(MultiFPFHIError):
    category = "config"


class FileAccessError(MultiFPFHIError):
    category = "io"

"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 1, OSError -> 2,
DivergenceError -> 3.
"""


class StyleForgeError(Exception):
    pass


class ConfigError(StyleForgeError):
    """Bad configuration, empty corpora, incompatible models, overlong input."""


class ModeError(StyleForgeError):
    """A loss was asked to run on a model with the wrong attention mode."""


class DegenerateInputError(StyleForgeError):
    """Runtime input the operation cannot act on (empty sequence, bad id)."""


class DivergenceError(StyleForgeError):
    """Training loss blew past the divergence guard."""

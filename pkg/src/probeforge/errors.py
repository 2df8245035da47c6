"""Exception hierarchy shared by all probeforge modules.

The CLI maps any ProbeforgeError to exit code 1; argparse usage errors keep
their conventional exit code 2.
"""


class ProbeforgeError(Exception):
    """Base class for all toolkit errors."""


class InputError(ProbeforgeError):
    """An input file or stream is unreadable or structurally unusable."""


class EmptyDatasetError(InputError):
    """An input yielded zero usable records."""


class InsufficientCorpusError(InputError):
    """The corpus holds fewer eligible sentences than requested."""


class ConfigurationError(ProbeforgeError):
    """A configuration value, model spec, or registry entry is invalid."""


class ValidationError(ProbeforgeError):
    """Data failed schema or consistency validation."""


class NumericalError(ProbeforgeError):
    """A numeric computation left its valid domain (zero norms, non-finite loss)."""

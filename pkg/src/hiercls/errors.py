"""Exception types shared across the package.

The CLI maps these onto exit codes: invalid input or config -> 2,
missing or corrupt files -> 3, internal invariant violations -> 4.
"""


class HierclsError(Exception):
    """Base class for all package errors."""


class TaxonomyError(HierclsError):
    """Taxonomy document is syntactically or structurally invalid."""


class UnknownNodeError(TaxonomyError):
    """A node id does not exist in the taxonomy."""


class NotALeafError(TaxonomyError):
    """A node id exists but names an internal node where a leaf is required."""


class ConfigError(HierclsError):
    """A configuration value is out of range or inconsistent."""


class LayoutMismatchError(HierclsError):
    """Scores or targets do not match the taxonomy's logit layout."""


class DatasetError(HierclsError):
    """Dataset directory is missing files or contains corrupt data."""


class CheckpointError(HierclsError):
    """Checkpoint file is malformed, truncated, or inconsistent."""


class InvariantError(HierclsError):
    """An internal invariant was violated; indicates a bug, not bad input."""

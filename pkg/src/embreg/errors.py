"""Shared exception types.

Every module raises subclasses of ToolkitError for data-level failures so the
CLI can map them to exit code 2, distinct from usage errors (exit 1).
"""


class ToolkitError(Exception):
    """Base class for all data/processing errors in this package."""

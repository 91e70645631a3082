"""Infection-risk decision support for kidney-transplant cohorts."""

__version__ = "0.1.0"

from .errors import GraftriskError

__all__ = ["GraftriskError", "__version__"]

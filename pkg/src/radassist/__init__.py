"""Desk-scale chest X-ray report generation and interactive dialog pipeline."""

__version__ = "0.1.0"

from .vocab import FindingVector, Status, Vocabulary  # noqa: F401

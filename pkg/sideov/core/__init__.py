"""
Core data structures: geometry, metrics, configuration and errors.
"""

from sideov.core import errors  # NOQA
from sideov.core.geometry import Box, BinaryMask, Proposal, ProposalSource  # NOQA

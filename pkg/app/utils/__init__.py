"""
Utility functions
"""

from .helpers import format_score, sanitize_filename, sequence_hash, setup_logging, torch_threads
from .rng import RngStreams, philox

__all__ = [
    'format_score',
    'sanitize_filename',
    'sequence_hash',
    'setup_logging',
    'torch_threads',
    'RngStreams',
    'philox',
]

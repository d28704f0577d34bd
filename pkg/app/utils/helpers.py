"""
Helper utility functions
"""

import hashlib
import logging
import os
import re
from contextlib import contextmanager
from typing import Iterable, Iterator, Optional

import torch

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def setup_logging(level: Optional[str] = None) -> None:
    """
    Configure root logging once for CLI and service entry points

    Args:
        level: Level name; falls back to ARWKV_LOG_LEVEL, then INFO
    """
    level_name = (level or os.getenv("ARWKV_LOG_LEVEL", "INFO")).upper()
    logging.basicConfig(level=getattr(logging, level_name, logging.INFO), format=LOG_FORMAT)


def format_score(score: float, as_percentage: bool = True) -> str:
    """
    Render a classification accuracy for the training and evaluation logs

    Args:
        score: Fraction of correctly classified clips, in [0, 1]
        as_percentage: Two-decimal percentage instead of a four-decimal fraction
    """
    if as_percentage:
        return f"{score * 100:.2f}%"
    return f"{score:.4f}"


def sanitize_filename(filename: str) -> str:
    """
    Turn an uploaded .melf name or a dataset sample id into a safe lower-case id

    The same id names the exported MELF file and is echoed back as
    `sample_id` in predictions, so "Dog Bark.melf" becomes "dog_bark.melf".
    """
    # drop directories from client-supplied paths
    filename = filename.split('/')[-1].split('\\')[-1]

    filename = re.sub(r'[^\w\-\.]', '_', filename)
    filename = re.sub(r'_+', '_', filename)

    return filename.lower()


def sequence_hash(chunks: Iterable[Iterable[int]]) -> str:
    """SHA-256 over a sequence of index batches (used to prove identical data order)"""
    digest = hashlib.sha256()
    for chunk in chunks:
        digest.update(",".join(str(int(i)) for i in chunk).encode("ascii"))
        digest.update(b";")
    return digest.hexdigest()


@contextmanager
def torch_threads(n: Optional[int]) -> Iterator[None]:
    """
    Temporarily pin torch intra-op parallelism

    Args:
        n: Thread count; None leaves the current setting (or ARWKV_NUM_THREADS) alone
    """
    previous = torch.get_num_threads()
    if n is None and os.getenv("ARWKV_NUM_THREADS"):
        n = int(os.environ["ARWKV_NUM_THREADS"])
    if n is not None:
        torch.set_num_threads(n)
    try:
        yield
    finally:
        torch.set_num_threads(previous)

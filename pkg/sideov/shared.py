"""
Shared constants, delayed imports and seeding helpers.

This module is supplementary to the ``andes.shared`` module.
"""
import hashlib
import logging
import os
import unittest
from functools import wraps

from andes.utils.lazyimport import LazyImport

logger = logging.getLogger(__name__)

np = LazyImport('import numpy as np')
pd = LazyImport('import pandas as pd')
torch = LazyImport('import torch')

# --- misc constants ---
copyright_msg = 'Copyright (C) 2025-2026 sideov contributors'

# environment switch for the long directional runs
extra_tests_env = 'SIDEOV_EXTRA_TESTS'


def sub_seed(seed, name, *keys):
    """
    Derive a named sub-seed from the global seed.

    All randomness in the package flows from one ``--seed`` through
    sub-seeds such as ``data``, ``init``, ``sampling``, ``text`` and
    ``order``, so that each consumer is independent of call order.

    Parameters
    ----------
    seed : int
        Global seed.
    name : str
        Sub-seed name.
    keys : tuple
        Extra keys, e.g., an image index or an iteration number.

    Returns
    -------
    int
        A 63-bit non-negative integer.
    """
    text = ':'.join([str(int(seed)), str(name)] + [str(k) for k in keys])
    digest = hashlib.sha256(text.encode('utf-8')).digest()
    return int.from_bytes(digest[:8], 'little') & ((1 << 63) - 1)


def get_dtype(name):
    """
    Return the torch dtype for ``'float32'`` or ``'float64'``.
    """
    dtypes = {'float32': torch.float32, 'float64': torch.float64}
    if name not in dtypes:
        raise ValueError(f"Unsupported dtype <{name}>, choose from {list(dtypes)}")
    return dtypes[name]


def extra_tests_enabled():
    """
    Return True if the long directional test runs are requested.
    """
    return os.environ.get(extra_tests_env, '0') not in ('', '0', 'false', 'False')


def skip_unittest_without_extra(f):
    """
    Decorator for skipping the long training-based tests.
    """

    @wraps(f)
    def wrapper(*args, **kwargs):
        if not extra_tests_enabled():
            raise unittest.SkipTest(f"Set {extra_tests_env}=1 to run long tests.")
        return f(*args, **kwargs)

    return wrapper

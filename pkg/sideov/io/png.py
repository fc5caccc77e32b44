"""
PNG image reading and writing through matplotlib.
"""

import logging
import os

import numpy as np
from matplotlib import image as mpimg

from sideov.core.errors import DataError
from sideov.utils.paths import atomic_path

logger = logging.getLogger(__name__)


def write_png(path, pixels):
    """
    Write ``(H, W, 3)`` uint8 pixels losslessly.
    """
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8 or pixels.ndim != 3 or pixels.shape[-1] != 3:
        raise ValueError(f'Expected (H, W, 3) uint8 pixels, got {pixels.dtype} {pixels.shape}')
    with atomic_path(path, suffix='.png') as tmp:
        mpimg.imsave(tmp, pixels, format='png')
    return path


def read_png(path):
    """
    Read an RGB(A) PNG as ``(H, W, 3)`` uint8 pixels.

    Raises
    ------
    DataError
        If the file is missing or not a readable PNG image.
    """
    if not os.path.isfile(path):
        raise DataError(f'Image file "{path}" not found')
    try:
        data = mpimg.imread(path, format='png')
    except (OSError, ValueError, SyntaxError) as e:
        raise DataError(f'Cannot read image "{path}": {e}')
    if data.ndim == 2:
        data = np.repeat(data[..., None], 3, axis=2)
    if data.ndim != 3 or data.shape[-1] < 3:
        raise DataError(f'Image "{path}" has unsupported shape {data.shape}')
    data = data[..., :3]
    if data.dtype == np.uint8:
        return data.copy()
    return np.round(np.asarray(data, dtype=np.float64) * 255).astype(np.uint8)

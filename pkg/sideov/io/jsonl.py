"""
JSON-lines writer and reader for detections.
"""

import json
import logging

from sideov.core.errors import DataError
from sideov.utils.paths import atomic_path

logger = logging.getLogger(__name__)


def write_jsonl(path, rows):
    """
    Write an iterable of dicts, one JSON object per line, atomically.

    Returns
    -------
    int
        Number of lines written.
    """
    n = 0
    with atomic_path(path, suffix='.jsonl') as tmp:
        with open(tmp, 'w', encoding='utf-8') as f:
            for row in rows:
                f.write(json.dumps(row, sort_keys=True))
                f.write('\n')
                n += 1
    logger.debug('%d lines written to "%s".', n, path)
    return n


def read_jsonl(path):
    """
    Read all lines of a JSON-lines file; blank lines are skipped.
    """
    out = []
    with open(path, 'r', encoding='utf-8') as f:
        for lineno, line in enumerate(f):
            if not line.strip():
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise DataError(f'Malformed line {lineno + 1} in "{path}": {e.msg}', f'/{lineno}')
    return out


def detection_rows(image_id, detections, with_rle=True):
    """
    One row per detection, tagged with the image id.
    """
    for det in detections:
        row = {'image_id': image_id}
        row.update(det.to_json(with_rle=with_rle))
        yield row

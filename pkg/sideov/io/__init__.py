"""
sideov input readers and output writers.
"""

from sideov.io.checkpoint import Checkpoint, load_checkpoint, save_checkpoint  # NOQA
from sideov.io.dataset import load_dataset, save_dataset  # NOQA
from sideov.io.jsonl import read_jsonl, write_jsonl  # NOQA
from sideov.io.png import read_png, write_png  # NOQA

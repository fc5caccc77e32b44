"""
Exceptions raised by sideov.

Non-fatal conditions (``DegenerateBox``, ``ZeroPositives``, empty masks
from box prompts) are reported as string flags instead, see ``FLAGS``.
"""

# string flags collected into caller-provided sets
DEGENERATE_BOX = 'DegenerateBox'
ZERO_POSITIVES = 'ZeroPositives'
EMPTY_MASK = 'EmptyMask'

FLAGS = (DEGENERATE_BOX, ZERO_POSITIVES, EMPTY_MASK)


class SideovError(Exception):
    """
    Base class of all sideov errors.
    """

    # exit code used by the command-line interface
    exit_code = 1


class ShapeError(SideovError, ValueError):
    """
    Tensor or grid dimensions do not match the contract.
    """


class InvalidBox(SideovError, ValueError):
    """
    A box with non-positive area or non-finite coordinates.
    """


class EmptyMask(SideovError, ValueError):
    """
    A mask without any true pixel where one is required.
    """


class InvalidConcept(SideovError, ValueError):
    """
    An empty or otherwise unusable concept string.
    """
    exit_code = 2


class DegenerateEnsemble(SideovError, ArithmeticError):
    """
    The template-averaged text embedding has zero norm.
    """


class PoolExhausted(SideovError, ValueError):
    """
    The concept pool is too small for the requested concept budget.
    """


class DataError(SideovError, ValueError):
    """
    Dataset content violates the schema.

    Parameters
    ----------
    msg : str
        Error message.
    pointer : str, optional
        JSON pointer to the offending element, e.g., ``/annotations/3/bbox``.
    """
    exit_code = 2

    def __init__(self, msg, pointer=None):
        self.pointer = pointer
        if pointer is not None:
            msg = f'{msg} (at {pointer})'
        super().__init__(msg)


class ConfigError(SideovError, KeyError):
    """
    Unknown or invalid configuration entry.

    Parameters
    ----------
    key : str
        The offending ``Section.key``.
    msg : str, optional
        Extra description.
    """
    exit_code = 2

    def __init__(self, key, msg=None):
        self.key = key
        self.msg = msg if msg is not None else f'Unknown config key <{key}>'
        super().__init__(self.msg)

    def __str__(self):
        return self.msg


class TrainingDiverged(SideovError, FloatingPointError):
    """
    A non-finite loss was produced during training.

    Parameters
    ----------
    batch_id : int
        Global iteration number of the failing batch.
    losses : dict
        Per-loss values of the failing batch.
    """

    def __init__(self, batch_id, losses):
        self.batch_id = batch_id
        self.losses = dict(losses)
        desc = ', '.join(f'{k}={v:.6g}' for k, v in self.losses.items())
        super().__init__(f'Non-finite loss at batch {batch_id}: {desc}')


class CheckpointError(SideovError, IOError):
    """
    Missing, truncated or incompatible checkpoint.
    """

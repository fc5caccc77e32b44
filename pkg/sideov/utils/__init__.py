from sideov.utils import paths  # NOQA
from sideov.utils.paths import atomic_path, atomic_write_text  # NOQA


def parse_list(value, typ=str, sep=','):
    """
    Split a comma-separated config value into a typed list.

    Parameters
    ----------
    value : str, list, tuple or scalar
        The raw config value.
    typ : type, optional
        Element type, ``str`` by default.
    sep : str, optional
        Separator.

    Returns
    -------
    list
        Parsed elements with surrounding blanks stripped.
    """
    if isinstance(value, (list, tuple)):
        return [typ(v) for v in value]
    if isinstance(value, (int, float)):
        return [typ(value)]
    return [typ(v.strip()) for v in str(value).split(sep) if v.strip() != '']



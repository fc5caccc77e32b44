"""
Path helpers for config files, logs, tests and atomic outputs,
mainly revised from ``andes.utils.paths``.
"""
import contextlib
import logging
import os
import pathlib
import tempfile

logger = logging.getLogger(__name__)


def sideov_root():
    """
    Return the root path to the sideov source code.
    """

    dir_name = os.path.dirname(os.path.abspath(__file__))
    return os.path.normpath(os.path.join(dir_name, '..'))


def tests_root():
    """Return the root path to the test suite"""
    dir_name = os.path.dirname(os.path.abspath(__file__))
    return os.path.normpath(os.path.join(dir_name, '..', '..', 'tests'))


def get_dot_sideov_path():
    """
    Return the path to ``$HOME/.sideov``
    """

    return os.path.join(str(pathlib.Path.home()), '.sideov')


def get_config_path(file_name='sideov.rc'):
    """
    Return the path of the config file to be loaded.

    Search Priority: 1. current directory; 2. ``~/.sideov``.

    Parameters
    ----------
    file_name : str, optional
        Config file name with the default as ``sideov.rc``.

    Returns
    -------
    Config path in string if found; None otherwise.
    """

    conf_path = None

    if os.path.isfile(file_name):
        conf_path = file_name
    elif os.path.isfile(os.path.join(get_dot_sideov_path(), file_name)):
        conf_path = os.path.join(get_dot_sideov_path(), file_name)

    return conf_path


def get_log_dir():
    """
    Get the directory for log file.

    The default is ``<tempdir>/sideov-*``, where ``<tempdir>`` is provided by ``tempfile.gettempdir()``.

    Returns
    -------
    str
        The path to the temporary logging directory
    """
    tempdir = tempfile.gettempdir()
    path = tempfile.mkdtemp(prefix='sideov-', dir=tempdir)
    return path


def confirm_overwrite(outfile, overwrite=False):
    """
    Return True if ``outfile`` may be written.

    Existing outputs are kept unless ``overwrite`` is True, which makes
    every command idempotent by default.
    """

    if os.path.exists(outfile) and not overwrite:
        logger.warning('"%s" already exists, use --force to overwrite.', outfile)
        return False
    return True


@contextlib.contextmanager
def atomic_path(path, suffix=''):
    """
    Yield a temporary path next to ``path``, renamed onto it on success.

    The temporary file is removed if the body raises, so a partial output
    never takes the final name.
    """
    path = os.fspath(path)
    dirname = os.path.dirname(os.path.abspath(path))
    os.makedirs(dirname, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix='.tmp-', suffix=suffix, dir=dirname)
    os.close(fd)
    try:
        yield tmp
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def atomic_write_text(path, text):
    """
    Write ``text`` to ``path`` through a temp file and rename.
    """
    with atomic_path(path) as tmp:
        with open(tmp, 'w', encoding='utf-8') as f:
            f.write(text)

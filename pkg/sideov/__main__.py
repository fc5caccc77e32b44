"""
sideov main entry point redirection to cli.py.
This makes the package callable with python -m sideov
"""

import sys

from sideov.cli import main

if __name__ == '__main__':
    sys.exit(main())

"""Entry point for `python -m fif_flow`."""

import sys

from fif_flow.pipeline.cli import main

if __name__ == "__main__":
    sys.exit(main())

"""``python -m smallface``."""

import sys

from .cli import main

sys.exit(main())

"""Time one- versus four-scale inference on an untrained default network (or a saved model)."""

import sys

from smallface.cli import main

if __name__ == "__main__":
    sys.exit(main(["bench", *sys.argv[1:]]))

# Entry point: `python main.py run config.txt`, `python main.py check config.txt`, ...
# All commands live in app.harness; the exit status is the one main() returns.
import sys

from app.harness import main

if __name__ == "__main__":
    sys.exit(main())

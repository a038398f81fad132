import sys

from nonlocal_rothe.cli import main

if __name__ == "__main__":
    sys.exit(main())

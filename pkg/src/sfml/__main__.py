import sys

from sfml.cli import main

sys.exit(main())

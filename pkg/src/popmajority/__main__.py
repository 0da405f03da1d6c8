import sys

from popmajority.cli import main

sys.exit(main())

import sys

from rin.cli import main

sys.exit(main())

import sys

from spi.cli import main

sys.exit(main())

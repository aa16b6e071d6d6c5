import sys

from batle.cli import main

sys.exit(main())

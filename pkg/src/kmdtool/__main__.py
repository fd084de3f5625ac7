import sys

from kmdtool.cli import main

sys.exit(main())

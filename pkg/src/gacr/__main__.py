import sys

from gacr.cli import main

sys.exit(main())

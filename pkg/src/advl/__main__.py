import sys

from advl.cli import main

sys.exit(main())

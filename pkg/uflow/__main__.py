import sys

from uflow.cli import main

sys.exit(main())

import sys

from hornn.cli import main

sys.exit(main())

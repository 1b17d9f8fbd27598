import sys

from remi.cli import main

sys.exit(main())

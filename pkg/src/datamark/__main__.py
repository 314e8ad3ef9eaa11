import sys

from datamark.cli import main

sys.exit(main())

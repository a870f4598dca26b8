import sys

from scanrecon.cli import main

sys.exit(main())

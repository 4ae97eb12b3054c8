import sys

from nephro.cli import main

sys.exit(main())

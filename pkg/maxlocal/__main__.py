import sys

from maxlocal.cli import main

sys.exit(main())

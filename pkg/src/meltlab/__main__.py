import sys

from meltlab.lab.cli import main

sys.exit(main())

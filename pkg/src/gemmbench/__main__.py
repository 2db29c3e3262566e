import sys

from gemmbench.cli import main

sys.exit(main())

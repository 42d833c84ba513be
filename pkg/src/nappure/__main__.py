import sys

from nappure.cli import main

sys.exit(main())

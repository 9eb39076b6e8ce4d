import sys

from groundfail_svi.cli import main

sys.exit(main())

import sys

from lvboost.cli import main

sys.exit(main())

import sys

from noiselens.cli import main

sys.exit(main())

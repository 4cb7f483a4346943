import sys

from firma.cli import main

sys.exit(main())

import sys

from softmil.cli import main

sys.exit(main())

import sys

from .cli_runner import main

sys.exit(main())

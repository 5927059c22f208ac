import sys

from agcnet.cli import main

sys.exit(main())

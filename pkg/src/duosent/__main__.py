import sys

from duosent.cli import main

sys.exit(main())

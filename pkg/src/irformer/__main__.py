import sys

from irformer.cli import main

sys.exit(main())

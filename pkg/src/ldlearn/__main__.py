import sys

from ldlearn.cli import main

sys.exit(main())

import sys

from examrec.cli import main

sys.exit(main())

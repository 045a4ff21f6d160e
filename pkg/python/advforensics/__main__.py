import sys

from advforensics.cli import main

sys.exit(main())

import sys

from atlasaug.cli import main

sys.exit(main())

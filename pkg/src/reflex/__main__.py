from reflex.cli import main
import sys

sys.exit(main())

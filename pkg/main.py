"""PyInstaller entry point; avoids relative-import issues."""
import sys
from osc_agent.cli import main

if __name__ == '__main__':
    sys.exit(main())

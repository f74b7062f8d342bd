#!/usr/bin/env python3
"""Run the tomokit command line from a source checkout without installing."""
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), "src"))

from tomokit.cli import main

if __name__ == "__main__":
    sys.exit(main())

#!/usr/bin/env python3
"""
Run a timecon experiment from a source checkout.
"""

import os
import sys

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from timecon.main import cli

if __name__ == "__main__":
    cli()

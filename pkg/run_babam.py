#!/usr/bin/env python3
from __future__ import annotations

import sys

try:
    from dotenv import load_dotenv
    load_dotenv()
except Exception:
    pass

from babam.cli import main


if __name__ == "__main__":
    sys.exit(main())

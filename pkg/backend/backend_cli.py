#!/usr/bin/env python3
"""Entry shim: lets callers point --backend-dir at this directory and run the
backend without installing the package (the src/ tree is put on sys.path)."""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent / "src"))

from qa_backend.cli import main  # noqa: E402

if __name__ == "__main__":
    raise SystemExit(main())

"""CLI entrypoint for edgecnn."""

from __future__ import annotations

from edgecnn.cli import main

if __name__ == "__main__":
    raise SystemExit(main())

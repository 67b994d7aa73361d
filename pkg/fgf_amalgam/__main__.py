from __future__ import annotations

# Used by `python -m fgf_amalgam`; absolute import so it also works as a top-level script.
from fgf_amalgam.cli import cli_main

if __name__ == "__main__":
    raise SystemExit(cli_main())

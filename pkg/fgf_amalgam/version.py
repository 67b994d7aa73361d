from __future__ import annotations

from pathlib import Path
from typing import List


def _candidate_roots() -> List[Path]:
    roots: List[Path] = []

    # Source checkout (repo root is parent of package)
    try:
        roots.append(Path(__file__).resolve().parents[1])
    except Exception:
        pass

    # Installed package: VERSION shipped next to the modules
    try:
        roots.append(Path(__file__).resolve().parent)
    except Exception:
        pass
    return roots


def read_version() -> str:
    """
    Reads the version from the root `VERSION` file.
    """
    for root in _candidate_roots():
        p = root / "VERSION"
        if p.exists():
            try:
                return p.read_text(encoding="utf-8").strip()
            except Exception:
                continue
    return "0.0.0"

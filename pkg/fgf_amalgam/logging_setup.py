from __future__ import annotations

import logging
import sys
from logging.handlers import RotatingFileHandler
from pathlib import Path

from .storage import ensure_dirs


def _logs_dir() -> Path:
    return ensure_dirs().logs_dir


def setup_logging(
    *,
    level: int = logging.INFO,
    filename: str = "fgf_amalgam.log",
    max_bytes: int = 2_000_000,
    backup_count: int = 3,
) -> Path:
    """
    Configures logging to stderr and a rotating file under <home>/logs/.
    Safe to call multiple times (won't duplicate handlers for the same file).
    """
    log_path = _logs_dir() / filename

    root = logging.getLogger()
    root.setLevel(level)

    fmt = logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s")

    # File handler (dedupe by resolved path).
    target = str(log_path.resolve())
    for h in list(root.handlers):
        if isinstance(h, RotatingFileHandler):
            try:
                existing = str(Path(h.baseFilename).resolve())
                if existing == target:
                    h.setLevel(level)
                    break
            except Exception:
                continue
    else:
        fh = RotatingFileHandler(log_path, maxBytes=max_bytes, backupCount=backup_count, encoding="utf-8")
        fh.setLevel(level)
        fh.setFormatter(fmt)
        root.addHandler(fh)

    # Console handler on stderr; stdout carries the reports, so INFO stays in the file unless debugging.
    console_level = level if level <= logging.DEBUG else max(level, logging.WARNING)
    streams = [h for h in root.handlers if getattr(h, "_fgf_amalgam_console", False)]
    if streams:
        for h in streams:
            h.setLevel(console_level)
    else:
        sh = logging.StreamHandler(sys.stderr)
        sh.setLevel(console_level)
        sh.setFormatter(fmt)
        sh._fgf_amalgam_console = True  # type: ignore[attr-defined]
        root.addHandler(sh)

    return log_path

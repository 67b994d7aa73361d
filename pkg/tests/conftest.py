from __future__ import annotations

import logging

import pytest


@pytest.fixture(autouse=True)
def isolated_home(tmp_path, monkeypatch):
    """Every test gets its own data directory and leaves the root logger as it found it."""
    monkeypatch.setenv("FGF_AMALGAM_HOME", str(tmp_path / "home"))
    monkeypatch.delenv("FGF_AMALGAM_DEBUG", raising=False)
    root = logging.getLogger()
    handlers = list(root.handlers)
    level = root.level
    yield tmp_path / "home"
    for h in list(root.handlers):
        if h not in handlers:
            root.removeHandler(h)
            h.close()
    root.setLevel(level)

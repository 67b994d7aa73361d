from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict

HOME_ENV = "FGF_AMALGAM_HOME"


@dataclass(frozen=True)
class AppPaths:
    root: Path
    config_json: Path
    logs_dir: Path
    reports_dir: Path


def _defaults() -> Dict[str, Any]:
    return {"stages_max": 6, "report": "text", "truncate": 8, "per_component": False}


def get_paths() -> AppPaths:
    home = os.environ.get(HOME_ENV)
    root = Path(home) if home else Path.home() / ".fgf_amalgam"
    return AppPaths(
        root=root,
        config_json=root / "config.json",
        logs_dir=root / "logs",
        reports_dir=root / "reports",
    )


def ensure_dirs() -> AppPaths:
    paths = get_paths()
    paths.root.mkdir(parents=True, exist_ok=True)
    paths.logs_dir.mkdir(parents=True, exist_ok=True)
    paths.reports_dir.mkdir(parents=True, exist_ok=True)
    return paths


def load_config() -> Dict[str, Any]:
    paths = ensure_dirs()
    if not paths.config_json.exists():
        return _defaults()
    try:
        cfg = json.loads(paths.config_json.read_text(encoding="utf-8"))
        if not isinstance(cfg, dict):
            return _defaults()
        # Backfill keys for older configs.
        for key, value in _defaults().items():
            cfg.setdefault(key, value)
        return cfg
    except Exception:
        return _defaults()


def save_config(cfg: Dict[str, Any]) -> None:
    paths = ensure_dirs()
    paths.config_json.write_text(json.dumps(cfg, indent=2), encoding="utf-8")


def save_report(name: str, text: str) -> Path:
    paths = ensure_dirs()
    out = paths.reports_dir / name
    out.write_text(text, encoding="utf-8")
    return out

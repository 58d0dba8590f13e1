"""Run manifests: everything needed to reproduce an artifact byte-for-byte."""

from __future__ import annotations

import json
import time
from pathlib import Path
from typing import Any

from . import __version__
from .train.config import RunConfig, config_hash

MANIFEST_NAME = "manifest.json"


def write_manifest(
    out_dir: str | Path,
    command: str,
    stage: str,
    seed: int,
    run_cfg: RunConfig,
    outputs: dict[str, Any],
    options: dict[str, Any] | None = None,
    prerequisites: dict[str, Any] | None = None,
    wall_clock_s: float | None = None,
) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {
        "manifest_version": 1,
        "command": command,
        "stage": stage,
        "seed": seed,
        "config_hash": config_hash(run_cfg),
        "config": run_cfg.to_dict(),
        "code_version": __version__,
        "outputs": {k: str(v) for k, v in outputs.items()},
        "options": options or {},
        "prerequisites": {k: str(v) for k, v in (prerequisites or {}).items() if v is not None},
        "wall_clock_s": wall_clock_s if wall_clock_s is not None else time.time(),
    }
    path = out_dir / MANIFEST_NAME
    path.write_text(json.dumps(doc, indent=2))
    return path


def read_manifest(path: str | Path) -> dict[str, Any]:
    p = Path(path)
    if p.is_dir():
        p = p / MANIFEST_NAME
    return json.loads(p.read_text())

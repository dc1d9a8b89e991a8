"""Plain-text key=value run configuration and provenance manifests.

Every CLI run writes a manifest (config hash, seed, content hash of the
package source) next to its outputs, so any artifact is reproducible from
its manifest alone.
"""

from __future__ import annotations

import hashlib
import json
import sys
import time
from pathlib import Path

from .checkpoint import config_hash


def _coerce(value: str):
    v = value.strip()
    low = v.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(v)
    except ValueError:
        pass
    try:
        return float(v)
    except ValueError:
        pass
    return v


def parse_config_file(path) -> dict:
    """key=value lines; '#' comments; values coerced to bool/int/float."""
    out = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"bad config line: {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = _coerce(value)
    return out


def apply_overrides(config: dict, overrides: list[str]) -> dict:
    for item in overrides or []:
        if "=" not in item:
            raise ValueError(f"override must be key=value, got {item!r}")
        key, value = item.split("=", 1)
        config[key.strip()] = _coerce(value)
    return config


def code_hash() -> str:
    """Content hash over the package's own source files."""
    pkg = Path(__file__).parent
    h = hashlib.sha256()
    for f in sorted(pkg.glob("*.py")):
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()[:16]


def write_run_manifest(out_dir, config: dict, seed: int) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "config": config,
        "config_hash": config_hash(config),
        "seed": seed,
        "code_hash": code_hash(),
        "argv": sys.argv,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    (out_dir / "run_manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest

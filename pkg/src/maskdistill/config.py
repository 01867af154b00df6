"""Flat ``key = value`` config files, dataclass coercion, and run manifests."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from pathlib import Path

from . import __version__

log = logging.getLogger(__name__)


def parse_value(raw: str):
    raw = raw.strip()
    low = raw.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", "null"):
        return None
    if "," in raw:
        return [parse_value(p) for p in raw.split(",") if p.strip()]
    for cast in (int, float):
        try:
            return cast(raw)
        except ValueError:
            pass
    return raw.strip("\"'")


def read_config(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment, optional ``[section]`` prefixes keys."""
    out = {}
    section = ""
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected key = value")
        k, v = line.split("=", 1)
        key = k.strip()
        if section:
            key = f"{section}.{key}"
        out[key] = parse_value(v)
    return out


def section(cfg: dict, name: str) -> dict:
    """Keys under ``name.`` with the prefix stripped; unprefixed keys are shared."""
    out = {k: v for k, v in cfg.items() if "." not in k}
    pre = name + "."
    out.update({k[len(pre):]: v for k, v in cfg.items() if k.startswith(pre)})
    return out


def fill_dataclass(cls, values: dict, strict: bool = False):
    """Build ``cls`` from the subset of ``values`` matching its fields."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(values) - set(fields)
    if strict and unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kw = {}
    for k, v in values.items():
        if k not in fields:
            continue
        default = fields[k].default
        if isinstance(default, tuple) and isinstance(v, list):
            v = tuple(v)
        elif isinstance(default, tuple) and not isinstance(v, tuple):
            v = (v,)
        elif isinstance(default, float) and isinstance(v, int) and not isinstance(v, bool):
            v = float(v)
        kw[k] = v
    return cls(**kw)


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def write_manifest(path, command: str, cfg: dict, seed: int, **extra) -> Path:
    """Write the run manifest to ``path`` (a directory gets ``manifest.json`` inside)."""
    path = Path(path)
    if path.is_dir() or not path.suffix:
        path = path / "manifest.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "code_version": __version__,
        "seed": seed,
        **extra,
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return path


class MetricsWriter:
    """Append-only JSON-lines log. ``wallclock`` is seconds since the writer opened."""

    def __init__(self, path=None, run_id: str = "", phase: str = ""):
        self.path = Path(path) if path else None
        self.run_id = run_id
        self.phase = phase
        self.records: list[dict] = []
        self._t0 = time.monotonic()
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, record: dict) -> dict:
        rec = {"run_id": self.run_id, "phase": self.phase, **record,
               "wallclock": round(time.monotonic() - self._t0, 6)}
        self.records.append(rec)
        if self.path:
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        return rec


def strip_wallclock(records) -> list[dict]:
    return [{k: v for k, v in r.items() if k != "wallclock"} for r in records]

"""Versioned .npz checkpoints: named float64 arrays plus a JSON header."""

from __future__ import annotations

import json
import os
import tempfile
import zipfile
from pathlib import Path

import numpy as np

from .models import Model, build_model

FORMAT_VERSION = 1
_META_KEY = "__meta__"


class CheckpointError(RuntimeError):
    pass


class CorruptCheckpoint(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


class ConfigMismatch(CheckpointError):
    pass


def save_checkpoint(model: Model, path, extra: dict | None = None) -> Path:
    """Write atomically: a temp file in the same directory is renamed into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "version": FORMAT_VERSION,
        "kind": model.kind,
        "config": model.config.to_dict(),
        "trainable": {k: bool(p.trainable) for k, p in model.params.items()},
        "extra": extra or {},
    }
    arrays = {k: p.data for k, p in model.params.items()}
    arrays[_META_KEY] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            np.savez(fh, **arrays)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Return (meta, arrays) after validating the container."""
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as npz:
            arrays = {k: npz[k] for k in npz.files}
    except (zipfile.BadZipFile, ValueError, OSError, EOFError, KeyError) as e:
        raise CorruptCheckpoint(f"{path}: unreadable checkpoint ({e})") from e
    if _META_KEY not in arrays:
        raise CorruptCheckpoint(f"{path}: missing header")
    try:
        meta = json.loads(arrays.pop(_META_KEY).tobytes().decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptCheckpoint(f"{path}: bad header ({e})") from e
    if meta.get("version") != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: format version {meta.get('version')}, expected {FORMAT_VERSION}")
    return meta, arrays


def load_checkpoint(path, expect_config: dict | None = None) -> Model:
    """Rebuild the model recorded in the header and load its parameters.

    If ``expect_config`` is given, any differing architecture field is an error.
    """
    meta, arrays = read_checkpoint(path)
    cfg = meta["config"]
    if expect_config is not None:
        diffs = {k: (cfg.get(k), v) for k, v in expect_config.items() if cfg.get(k) != v}
        if diffs:
            detail = ", ".join(f"{k}: checkpoint {a} vs run {b}" for k, (a, b) in sorted(diffs.items()))
            raise ConfigMismatch(f"{path}: config mismatch ({detail})")
    model = build_model(meta["kind"], cfg)
    try:
        model.load_state(arrays)
    except (KeyError, ValueError) as e:
        raise ConfigMismatch(f"{path}: {e}") from e
    for k, flag in meta.get("trainable", {}).items():
        if k in model.params:
            model.params[k].trainable = flag
            model.params[k].requires_grad = flag
    model.meta = meta.get("extra", {})
    return model


def describe(path) -> dict:
    meta, arrays = read_checkpoint(path)
    return {
        "kind": meta["kind"],
        "version": meta["version"],
        "config": meta["config"],
        "n_params": int(sum(a.size for a in arrays.values())),
        "tensors": {k: list(a.shape) for k, a in sorted(arrays.items())},
        "extra": meta.get("extra", {}),
    }

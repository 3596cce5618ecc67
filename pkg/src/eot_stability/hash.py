from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Dict, Iterable, List, Union

import numpy as np

CHUNK_SIZE = 4 * 1024 * 1024


def calculate_sha256(filepath: Union[str, Path], chunk_size: int = CHUNK_SIZE) -> str:
    sha256 = hashlib.sha256()
    with open(filepath, "rb") as f:
        for chunk in iter(lambda: f.read(chunk_size), b""):
            sha256.update(chunk)
    return sha256.hexdigest()


def batch_get_sha256(filepaths: Iterable[Union[str, Path]]) -> Dict[str, str]:
    """Hash several files concurrently; missing files map to an empty string."""
    paths: List[str] = [str(p) for p in filepaths]
    existing = [p for p in paths if os.path.exists(p)]
    max_workers = max(1, min(len(existing), os.cpu_count() or 1))

    results = {p: "" for p in paths}
    if not existing:
        return results
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        for path, sha256 in zip(existing, pool.map(calculate_sha256, existing)):
            results[path] = sha256
    return results


def config_digest(data: Any) -> str:
    """SHA-256 of the canonical JSON form of ``data`` (sorted keys, no spaces)."""
    payload = json.dumps(data, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def support_digest(keys: Iterable[tuple]) -> str:
    """Short identifier of an ordered atom list given its canonical keys."""
    sha256 = hashlib.sha256()
    for key in keys:
        sha256.update(np.asarray(key, dtype=np.float64).tobytes())
        sha256.update(b"|")
    return sha256.hexdigest()[:16]

"""Named parameter arrays and the versioned checkpoint container.

Checkpoint layout: one JSON manifest line (format version, per-entry name /
shape / byte offset, RNG state, free-form metadata) followed by the raw
little-endian float64 payloads.  Round-trips are bit-exact.
"""
from __future__ import annotations

import hashlib
import json

import numpy as np

FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


class ParamStore:
    """Map of name -> float64 array; shapes are frozen at creation."""

    def __init__(self):
        self._entries: dict[str, np.ndarray] = {}
        self.meta: dict = {}

    def create(self, name, value):
        if name in self._entries:
            raise KeyError(f"parameter {name!r} already exists")
        self._entries[name] = np.array(value, dtype=np.float64)
        return self._entries[name]

    def __getitem__(self, name):
        return self._entries[name]

    def __contains__(self, name):
        return name in self._entries

    def set_(self, name, value):
        cur = self._entries[name]
        value = np.asarray(value, dtype=np.float64)
        if value.shape != cur.shape:
            raise ValueError(f"shape of {name!r} is immutable: "
                             f"{cur.shape} vs {value.shape}")
        self._entries[name] = value

    def names(self):
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def subset(self, prefix):
        """New store holding copies of all entries under a name prefix."""
        sub = ParamStore()
        for name, arr in self._entries.items():
            if name.startswith(prefix):
                sub.create(name, arr.copy())
        return sub

    def copy(self):
        dup = ParamStore()
        for name, arr in self._entries.items():
            dup.create(name, arr.copy())
        dup.meta = json.loads(json.dumps(self.meta))
        return dup

    def __len__(self):
        return len(self._entries)


def fingerprint(store):
    """Content hash over entry names, shapes and payload bytes."""
    h = hashlib.sha256()
    for name in sorted(store.names()):
        arr = store[name]
        h.update(name.encode())
        h.update(json.dumps(list(arr.shape)).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def save_checkpoint(store, path, rng_state=None):
    entries = []
    offset = 0
    blobs = []
    for name in sorted(store.names()):
        arr = store[name]
        raw = arr.astype("<f8").tobytes()  # tobytes always emits C order
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += len(raw)
        blobs.append(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "entries": entries,
        "rng_state": rng_state,
        "meta": store.meta,
    }
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":"))
    with open(path, "wb") as fh:
        fh.write(header.encode())
        fh.write(b"\n")
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        header = fh.readline()
        payload = fh.read()
    try:
        manifest = json.loads(header.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint manifest: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format version {manifest.get('format_version')}")
    store = ParamStore()
    for entry in manifest["entries"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        raw = payload[start : start + 8 * count]
        if len(raw) != 8 * count:
            raise CheckpointError(f"truncated payload for entry {entry['name']!r}")
        arr = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        store.create(entry["name"], arr)
    store.meta = manifest.get("meta", {})
    return store, manifest.get("rng_state")

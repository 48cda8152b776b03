"""Bags of patch features and the on-disk bag store.

Store layout::

    <root>/manifest.json      {"dim": C, "classes": {...}, "bags": [{id, label, site, path, n_patches}]}
    <root>/<path>             b"CATB" | u32 version | u32 N | u32 C | N*C float32 (little-endian, row-major)
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError

BAG_MAGIC = b"CATB"
BAG_VERSION = 1
_HEADER = struct.Struct("<4sIII")


@dataclass
class Bag:
    id: str
    features: np.ndarray
    label: int
    site: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        if self.features.ndim != 2:
            raise ValidationError(f"bag {self.id!r}: features must be 2-D, got shape {self.features.shape}")

    @property
    def n_patches(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def encode_payload(features: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(features, dtype="<f4")
    n, c = arr.shape
    return _HEADER.pack(BAG_MAGIC, BAG_VERSION, n, c) + arr.tobytes(order="C")


def decode_payload(buf: bytes) -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise FormatError(f"payload too short: {len(buf)} bytes")
    magic, version, n, c = _HEADER.unpack_from(buf)
    if magic != BAG_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {BAG_MAGIC!r}")
    if version != BAG_VERSION:
        raise FormatError(f"unsupported bag payload version {version}")
    expected = _HEADER.size + 4 * n * c
    if len(buf) != expected:
        raise FormatError(f"payload length {len(buf)} != {expected} for N={n}, C={c}")
    return np.frombuffer(buf, dtype="<f4", offset=_HEADER.size).reshape(n, c).astype(np.float32)


def write_store(root: str | Path, bags: list[Bag], classes: dict[str, int]) -> Path:
    """Write bags under ``root`` and return the manifest path."""
    root = Path(root)
    (root / "bags").mkdir(parents=True, exist_ok=True)
    if not bags:
        raise ValidationError("cannot write an empty bag store")
    dim = bags[0].dim
    entries = []
    for bag in bags:
        if bag.dim != dim:
            raise ValidationError(f"bag {bag.id!r} has dim {bag.dim}, store dim is {dim}")
        rel = f"bags/{bag.id}.catb"
        (root / rel).write_bytes(encode_payload(bag.features))
        entries.append(
            {"id": bag.id, "label": int(bag.label), "site": bag.site, "path": rel, "n_patches": bag.n_patches}
        )
    manifest = {"dim": dim, "classes": classes, "bags": entries}
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")
    return path


def read_store(root: str | Path) -> tuple[list[Bag], dict]:
    """Read every bag listed in ``root/manifest.json``.

    Returns the bags (manifest order) and the manifest dict.
    """
    root = Path(root)
    if root.is_file():
        root = root.parent
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.json in {root}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    dim = int(manifest["dim"])
    bags = []
    for entry in manifest["bags"]:
        feats = decode_payload((root / entry["path"]).read_bytes())
        if feats.shape != (entry["n_patches"], dim):
            raise FormatError(
                f"bag {entry['id']!r}: payload shape {feats.shape} disagrees with manifest "
                f"(n_patches={entry['n_patches']}, dim={dim})"
            )
        bags.append(Bag(entry["id"], feats, int(entry["label"]), entry["site"]))
    return bags, manifest

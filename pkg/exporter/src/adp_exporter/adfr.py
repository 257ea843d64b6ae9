"""Writers for the ADFR record byte layout and the JSON-lines manifest.

This mirrors the documented external format of the training engine (the
byte layout is the interface between the two packages):

    magic "ADFR", version u32=1, flags u32 (bit0 augmented, bit1 fractions),
    image_id and class_id as u32-length-prefixed UTF-8, image_label u8,
    level count u32, per level H u32, W u32, C u32 + H*W*C f32 (row-major),
    then augmented blocks (same headers, dims must match) if bit0,
    then per-level H*W f32 fraction maps if bit1.  Little-endian throughout.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"ADFR"
VERSION = 1
FLAG_AUGMENTED = 1
FLAG_FRACTIONS = 2


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def pack_record(image_id: str, class_id: str, image_label: int,
                levels: list[np.ndarray], augmented: list[np.ndarray] | None,
                fractions: list[np.ndarray] | None) -> bytes:
    if image_label not in (0, 1):
        raise ValueError(f"image_label must be 0 or 1, got {image_label}")
    flags = (FLAG_AUGMENTED if augmented is not None else 0) | \
            (FLAG_FRACTIONS if fractions is not None else 0)
    parts = [MAGIC, struct.pack("<II", VERSION, flags), _pack_str(image_id),
             _pack_str(class_id), struct.pack("<B", image_label),
             struct.pack("<I", len(levels))]

    def add_grids(grids):
        for grid in grids:
            grid = np.ascontiguousarray(grid, dtype=np.float32)
            if grid.ndim != 3:
                raise ValueError(f"feature grid must be (H, W, C), got {grid.shape}")
            if not np.all(np.isfinite(grid)):
                raise ValueError("feature grid contains non-finite values")
            parts.append(struct.pack("<III", *grid.shape))
            parts.append(grid.astype("<f4").tobytes())

    add_grids(levels)
    if augmented is not None:
        if [g.shape for g in augmented] != [g.shape for g in levels]:
            raise ValueError("augmented grid dims differ from originals")
        add_grids(augmented)
    if fractions is not None:
        for m, grid in zip(fractions, levels):
            m = np.ascontiguousarray(m, dtype=np.float32)
            if m.shape != grid.shape[:2]:
                raise ValueError(f"fraction map {m.shape} does not match grid {grid.shape[:2]}")
            if m.min() < 0 or m.max() > 1:
                raise ValueError("fraction values outside [0, 1]")
            if image_label == 0 and m.max() > 0:
                raise ValueError("normal record has nonzero anomaly fractions")
            parts.append(m.astype("<f4").tobytes())
    return b"".join(parts)


def write_record(path, **kwargs) -> None:
    Path(path).write_bytes(pack_record(**kwargs))


def append_manifest(path, entries: list[dict]) -> None:
    """Append manifest lines, refusing duplicate record paths."""
    path = Path(path)
    existing = []
    seen = set()
    if path.exists():
        for line in path.read_text().splitlines():
            if line.strip():
                existing.append(line)
                seen.add(json.loads(line)["record_path"])
    new_lines = []
    for entry in entries:
        if entry["record_path"] in seen:
            raise ValueError(f"manifest already lists '{entry['record_path']}'")
        seen.add(entry["record_path"])
        new_lines.append(json.dumps({"record_path": entry["record_path"],
                                     "class_id": entry["class_id"],
                                     "split": entry["split"],
                                     "image_label": entry["image_label"]}))
    path.write_text("\n".join(existing + new_lines) + "\n")

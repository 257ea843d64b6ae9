"""Bit-exact binary storage: ADFR feature records, manifests, checkpoints.

ADFR layout (all integers little-endian):

    magic   "ADFR" (4 bytes)
    version u32 = 1
    flags   u32  bit0 = augmented grids present, bit1 = fraction maps present
    image_id   u32 length + UTF-8 bytes
    class_id   u32 length + UTF-8 bytes
    image_label u8 (0 normal / 1 abnormal)
    L       u32 level count
    per level: H u32, W u32, C u32, then H*W*C f32 values (row-major h, w, c)
    if bit0: per level H u32, W u32, C u32 (must equal the originals), values
    if bit1: per level H*W f32 anomaly fractions in [0, 1]

The checkpoint container ("ADCK") is a versioned sequence of tagged fields;
see :func:`write_tagged` / :func:`read_tagged`.  Manifests are JSON lines
with keys record_path, class_id, split, image_label.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC_RECORD = b"ADFR"
MAGIC_CHECKPOINT = b"ADCK"
RECORD_VERSION = 1
CHECKPOINT_VERSION = 1

FLAG_AUGMENTED = 1
FLAG_FRACTIONS = 2

SPLITS = ("train", "reference", "test")


class FormatError(ValueError):
    """Raised for any malformed record, manifest, or checkpoint."""


@dataclass
class FeatureGrid:
    """One level's patch features, shape (H, W, C)."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 3 or min(v.shape) < 1:
            raise FormatError(f"feature grid must be (H, W, C) with positive dims, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise FormatError("feature grid contains non-finite values")
        self.values = v

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape


@dataclass
class MultiLevelFeatureRecord:
    """One image's per-level patch features plus optional twin and fractions."""

    image_id: str
    class_id: str
    image_label: int
    levels: list[FeatureGrid]
    augmented_levels: list[FeatureGrid] | None = None
    anomaly_fraction_maps: list[np.ndarray] | None = None

    def __post_init__(self):
        if self.image_label not in (0, 1):
            raise FormatError(f"image_label must be 0 or 1, got {self.image_label}")
        if not self.levels:
            raise FormatError("record must carry at least one level")
        if self.augmented_levels is not None:
            if len(self.augmented_levels) != len(self.levels):
                raise FormatError("augmented level count differs from original")
            for i, (a, b) in enumerate(zip(self.augmented_levels, self.levels)):
                if a.shape != b.shape:
                    raise FormatError(f"augmented level {i} dims {a.shape} != original {b.shape}")
        if self.anomaly_fraction_maps is not None:
            maps = []
            for i, (m, lvl) in enumerate(zip(self.anomaly_fraction_maps, self.levels)):
                m = np.asarray(m, dtype=np.float32)
                h, w, _ = lvl.shape
                if m.shape != (h, w):
                    raise FormatError(f"fraction map {i} shape {m.shape} != level grid ({h}, {w})")
                if not np.all(np.isfinite(m)) or m.min() < 0 or m.max() > 1:
                    raise FormatError(f"fraction map {i} values outside [0, 1]")
                maps.append(m)
            if len(self.anomaly_fraction_maps) != len(self.levels):
                raise FormatError("fraction map count differs from level count")
            if self.image_label == 0 and any(m.max() > 0 for m in maps):
                raise FormatError("normal record (label 0) has nonzero anomaly fractions")
            self.anomaly_fraction_maps = maps

    def level_shapes(self) -> list[tuple[int, int, int]]:
        return [g.shape for g in self.levels]


# ---------------------------------------------------------------------------
# low-level byte cursor
# ---------------------------------------------------------------------------


class _Cursor:
    def __init__(self, buf: bytes, what: str):
        self.buf = buf
        self.pos = 0
        self.what = what

    def take(self, n: int, context: str) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise FormatError(f"{self.what}: truncated file while reading {context}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self, context: str) -> int:
        return self.take(1, context)[0]

    def u32(self, context: str) -> int:
        return struct.unpack("<I", self.take(4, context))[0]

    def i64(self, context: str) -> int:
        return struct.unpack("<q", self.take(8, context))[0]

    def f64(self, context: str) -> float:
        return struct.unpack("<d", self.take(8, context))[0]

    def string(self, context: str) -> str:
        n = self.u32(f"{context} length")
        raw = self.take(n, context)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"{self.what}: invalid UTF-8 in {context}") from e

    def array(self, count: int, dtype, context: str) -> np.ndarray:
        itemsize = np.dtype(dtype).itemsize
        raw = self.take(count * itemsize, context)
        return np.frombuffer(raw, dtype=np.dtype(dtype).newbyteorder("<")).astype(dtype)

    def done(self) -> None:
        if self.pos != len(self.buf):
            raise FormatError(f"{self.what}: unexpected trailing data ({len(self.buf) - self.pos} bytes)")


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


# ---------------------------------------------------------------------------
# ADFR records
# ---------------------------------------------------------------------------


def record_flags(record: MultiLevelFeatureRecord) -> int:
    flags = 0
    if record.augmented_levels is not None:
        flags |= FLAG_AUGMENTED
    if record.anomaly_fraction_maps is not None:
        flags |= FLAG_FRACTIONS
    return flags


def pack_record(record: MultiLevelFeatureRecord, flags: int | None = None) -> bytes:
    """Serialize a record. An explicit ``flags`` must match the record content."""
    derived = record_flags(record)
    if flags is None:
        flags = derived
    elif flags != derived:
        raise FormatError(
            f"flags 0b{flags:02b} do not match record content (expected 0b{derived:02b})")
    parts = [MAGIC_RECORD, struct.pack("<II", RECORD_VERSION, flags),
             _pack_str(record.image_id), _pack_str(record.class_id),
             struct.pack("<B", record.image_label),
             struct.pack("<I", len(record.levels))]
    for grid in record.levels:
        h, w, c = grid.shape
        parts.append(struct.pack("<III", h, w, c))
        parts.append(grid.values.astype("<f4").tobytes())
    if flags & FLAG_AUGMENTED:
        for grid in record.augmented_levels:
            h, w, c = grid.shape
            parts.append(struct.pack("<III", h, w, c))
            parts.append(grid.values.astype("<f4").tobytes())
    if flags & FLAG_FRACTIONS:
        for m in record.anomaly_fraction_maps:
            parts.append(m.astype("<f4").tobytes())
    return b"".join(parts)


def write_record(record: MultiLevelFeatureRecord, path, flags: int | None = None) -> None:
    data = pack_record(record, flags)
    Path(path).write_bytes(data)


def parse_record(buf: bytes, what: str = "record") -> MultiLevelFeatureRecord:
    cur = _Cursor(buf, what)
    magic = cur.take(4, "magic")
    if magic != MAGIC_RECORD:
        raise FormatError(f"{what}: bad magic {magic!r}")
    version = cur.u32("version")
    if version != RECORD_VERSION:
        raise FormatError(f"{what}: unknown version {version}")
    flags = cur.u32("flags")
    if flags & ~(FLAG_AUGMENTED | FLAG_FRACTIONS):
        raise FormatError(f"{what}: unknown flag bits 0x{flags:x}")
    image_id = cur.string("image_id")
    class_id = cur.string("class_id")
    label = cur.u8("image_label")
    if label not in (0, 1):
        raise FormatError(f"{what}: image_label must be 0 or 1, got {label}")
    n_levels = cur.u32("level count")
    if n_levels < 1:
        raise FormatError(f"{what}: level count must be >= 1")

    def read_grids(kind: str, expect: list[tuple[int, int, int]] | None) -> list[FeatureGrid]:
        grids = []
        for i in range(n_levels):
            h = cur.u32(f"{kind} level {i} H")
            w = cur.u32(f"{kind} level {i} W")
            c = cur.u32(f"{kind} level {i} C")
            if min(h, w, c) < 1:
                raise FormatError(f"{what}: {kind} level {i} has zero dimension")
            if expect is not None and (h, w, c) != expect[i]:
                raise FormatError(f"{what}: {kind} level {i} dims ({h}, {w}, {c}) "
                                  f"!= original {expect[i]}")
            count = h * w * c
            if count * 4 > len(buf) - cur.pos:
                raise FormatError(f"{what}: truncated file in {kind} level {i} data")
            values = cur.array(count, np.float32, f"{kind} level {i} data")
            if not np.all(np.isfinite(values)):
                raise FormatError(f"{what}: non-finite values in {kind} level {i}")
            grids.append(FeatureGrid(values.reshape(h, w, c)))
        return grids

    levels = read_grids("feature", None)
    shapes = [g.shape for g in levels]
    augmented = read_grids("augmented", shapes) if flags & FLAG_AUGMENTED else None
    fractions = None
    if flags & FLAG_FRACTIONS:
        fractions = []
        for i, (h, w, _) in enumerate(shapes):
            m = cur.array(h * w, np.float32, f"fraction map {i}")
            if not np.all(np.isfinite(m)) or m.min() < 0 or m.max() > 1:
                raise FormatError(f"{what}: fraction map {i} values outside [0, 1]")
            fractions.append(m.reshape(h, w))
    cur.done()
    try:
        return MultiLevelFeatureRecord(image_id, class_id, label, levels, augmented, fractions)
    except FormatError as e:
        raise FormatError(f"{what}: {e}") from e


def read_record(path) -> MultiLevelFeatureRecord:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"record file not found: {path}")
    return parse_record(path.read_bytes(), what=str(path))


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


@dataclass
class ManifestEntry:
    record_path: str
    class_id: str
    split: str
    image_label: int


@dataclass
class Manifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    base_dir: Path = field(default_factory=Path)

    def split(self, name: str) -> list[ManifestEntry]:
        if name not in SPLITS:
            raise FormatError(f"unknown split '{name}', allowed: {', '.join(SPLITS)}")
        return [e for e in self.entries if e.split == name]

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.record_path)
        return p if p.is_absolute() else self.base_dir / p

    def load(self, entry: ManifestEntry) -> MultiLevelFeatureRecord:
        """Read the entry's record, enforcing label consistency."""
        record = read_record(self.resolve(entry))
        if record.image_label != entry.image_label:
            raise FormatError(f"{entry.record_path}: manifest label {entry.image_label} "
                              f"!= record label {record.image_label}")
        return record


def load_manifest(path) -> Manifest:
    """Parse a JSON-lines manifest. Record paths are relative to the manifest."""
    path = Path(path)
    if not path.exists():
        raise FormatError(f"manifest not found: {path}")
    entries = []
    seen = set()
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise FormatError(f"{path}:{lineno}: invalid JSON: {e}") from e
        missing = {"record_path", "class_id", "split", "image_label"} - obj.keys()
        if missing:
            raise FormatError(f"{path}:{lineno}: missing keys {sorted(missing)}")
        split = obj["split"]
        if split not in SPLITS:
            raise FormatError(f"{path}:{lineno}: unknown split '{split}', "
                              f"allowed: {', '.join(SPLITS)}")
        label = obj["image_label"]
        if label not in (0, 1):
            raise FormatError(f"{path}:{lineno}: image_label must be 0 or 1")
        rec_path = obj["record_path"]
        if rec_path in seen:
            raise FormatError(f"{path}:{lineno}: duplicate record_path '{rec_path}'")
        seen.add(rec_path)
        entries.append(ManifestEntry(rec_path, obj["class_id"], split, label))
    return Manifest(entries, base_dir=path.parent)


def save_manifest(manifest: Manifest, path) -> None:
    lines = []
    for e in manifest.entries:
        lines.append(json.dumps({"record_path": e.record_path, "class_id": e.class_id,
                                 "split": e.split, "image_label": e.image_label}))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


# ---------------------------------------------------------------------------
# tagged binary container (checkpoints, cached signatures)
# ---------------------------------------------------------------------------

_TAG_I64 = 0
_TAG_F64 = 1
_TAG_STR = 2
_TAG_ARRAY = 3

_ARRAY_DTYPES = {0: np.float32, 1: np.float64, 2: np.int64}
_ARRAY_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int64): 2}


def write_tagged(fields: dict, path, magic: bytes = MAGIC_CHECKPOINT,
                 version: int = CHECKPOINT_VERSION) -> None:
    """Write an ordered mapping of named fields as a tagged binary container.

    Supported values: int, float, str, numpy arrays (f32/f64/i64).  The byte
    layout is deterministic, so identical fields produce identical files.
    """
    parts = [magic, struct.pack("<II", version, len(fields))]
    for name, value in fields.items():
        parts.append(_pack_str(name))
        if isinstance(value, bool):
            raise FormatError(f"field '{name}': store flags as int, not bool")
        if isinstance(value, (int, np.integer)):
            parts.append(struct.pack("<Bq", _TAG_I64, int(value)))
        elif isinstance(value, (float, np.floating)):
            parts.append(struct.pack("<Bd", _TAG_F64, float(value)))
        elif isinstance(value, str):
            parts.append(struct.pack("<B", _TAG_STR) + _pack_str(value))
        elif isinstance(value, np.ndarray):
            code = _ARRAY_CODES.get(value.dtype)
            if code is None:
                raise FormatError(f"field '{name}': unsupported array dtype {value.dtype}")
            header = struct.pack("<BBI", _TAG_ARRAY, code, value.ndim)
            dims = struct.pack(f"<{value.ndim}q", *value.shape) if value.ndim else b""
            parts.append(header + dims + np.ascontiguousarray(value).tobytes())
        else:
            raise FormatError(f"field '{name}': unsupported type {type(value).__name__}")
    Path(path).write_bytes(b"".join(parts))


def read_tagged(path, magic: bytes = MAGIC_CHECKPOINT,
                version: int = CHECKPOINT_VERSION) -> dict:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"file not found: {path}")
    cur = _Cursor(path.read_bytes(), str(path))
    got = cur.take(4, "magic")
    if got != magic:
        raise FormatError(f"{path}: bad magic {got!r}")
    ver = cur.u32("version")
    if ver != version:
        raise FormatError(f"{path}: unknown version {ver}")
    count = cur.u32("field count")
    fields: dict = {}
    for _ in range(count):
        name = cur.string("field name")
        tag = cur.u8(f"field '{name}' tag")
        if tag == _TAG_I64:
            fields[name] = cur.i64(f"field '{name}'")
        elif tag == _TAG_F64:
            fields[name] = cur.f64(f"field '{name}'")
        elif tag == _TAG_STR:
            fields[name] = cur.string(f"field '{name}'")
        elif tag == _TAG_ARRAY:
            code = cur.u8(f"field '{name}' dtype")
            if code not in _ARRAY_DTYPES:
                raise FormatError(f"{path}: field '{name}' has unknown dtype code {code}")
            ndim = cur.u32(f"field '{name}' ndim")
            if ndim > 8:
                raise FormatError(f"{path}: field '{name}' ndim {ndim} too large")
            shape = tuple(cur.i64(f"field '{name}' dim") for _ in range(ndim))
            if any(d < 0 for d in shape):
                raise FormatError(f"{path}: field '{name}' negative dimension")
            count_items = 1
            for d in shape:
                count_items *= d
            dtype = _ARRAY_DTYPES[code]
            if count_items * np.dtype(dtype).itemsize > len(cur.buf) - cur.pos:
                raise FormatError(f"{path}: truncated file in field '{name}'")
            fields[name] = cur.array(count_items, dtype, f"field '{name}'").reshape(shape)
        else:
            raise FormatError(f"{path}: field '{name}' has unknown tag {tag}")
    cur.done()
    return fields

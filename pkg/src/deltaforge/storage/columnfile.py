"""ColumnFile codec: magic ``DFC1``, little-endian, JSON footer, trailing
8-byte footer offset.

Rows are split into row groups of at most 4096 rows. Each column chunk is a
1-byte encoding tag (0 PLAIN, 1 RLE), a null bitmap (bit set = null), and the
non-null values in row order. The encoder picks RLE per column per group only
when it comes out smaller. The footer indexes every chunk with its byte range,
min/max, and null count, so metadata probes and chunk-granular cache loads
never touch row data.
"""

from __future__ import annotations

import io
import json
import os
import secrets
import struct
from array import array
from dataclasses import dataclass
from pathlib import Path

from ..errors import CorruptFile
from ..schema import ColumnType, TypeKind, decimal_type

MAGIC = b"DFC1"
ROW_GROUP_ROWS = 4096
PLAIN, RLE = 0, 1

# Insert files either carry bare data columns or lead with the three RecordId
# columns (compaction outputs). Delete files carry target triples, optionally
# led by the deleting WriteId (merged delete deltas).
LAYOUT_PLAIN = "plain"
LAYOUT_RID = "rid"
LAYOUT_TRIPLES = "triples"
LAYOUT_DELETER_TRIPLES = "deleter_triples"

_u32 = struct.Struct("<I")
_u64 = struct.Struct("<Q")
_i64 = struct.Struct("<q")
_f64 = struct.Struct("<d")

_INT_KINDS = (TypeKind.INT64, TypeKind.DECIMAL, TypeKind.TIMESTAMP)


@dataclass(frozen=True)
class ChunkMeta:
    offset: int
    length: int
    min_value: object
    max_value: object
    null_count: int


@dataclass(frozen=True)
class GroupMeta:
    rows: int
    cols: tuple[ChunkMeta, ...]


@dataclass(frozen=True)
class FileMeta:
    uid: str
    layout: str
    types: tuple[ColumnType, ...]
    nrows: int
    groups: tuple[GroupMeta, ...]
    file_length: int


def _type_to_json(t: ColumnType):
    if t.kind is TypeKind.DECIMAL:
        return ["DECIMAL", t.precision, t.scale]
    return [t.kind.value]


def _type_from_json(spec) -> ColumnType:
    if spec[0] == "DECIMAL":
        return decimal_type(spec[1], spec[2])
    return ColumnType(TypeKind[spec[0]])


def _null_bitmap(values) -> bytes:
    n = len(values)
    bm = bytearray((n + 7) // 8)
    for i, v in enumerate(values):
        if v is None:
            bm[i >> 3] |= 1 << (i & 7)
    return bytes(bm)


def _encode_values_plain(kind: TypeKind, values: list) -> bytes:
    if kind in _INT_KINDS:
        return array("q", values).tobytes()
    if kind is TypeKind.FLOAT64:
        return array("d", values).tobytes()
    if kind is TypeKind.BOOL:
        return bytes(1 if v else 0 for v in values)
    # STRING: count, lengths, blob
    blobs = [v.encode("utf-8") for v in values]
    parts = [_u32.pack(len(blobs)), array("I", [len(b) for b in blobs]).tobytes()]
    parts.extend(blobs)
    return b"".join(parts)


def _encode_one(kind: TypeKind, value) -> bytes:
    if kind in _INT_KINDS:
        return _i64.pack(value)
    if kind is TypeKind.FLOAT64:
        return _f64.pack(value)
    if kind is TypeKind.BOOL:
        return b"\x01" if value else b"\x00"
    b = value.encode("utf-8")
    return _u32.pack(len(b)) + b


def _runs(values: list) -> list[tuple[int, object]]:
    runs: list[tuple[int, object]] = []
    for v in values:
        if runs and runs[-1][1] == v:
            runs[-1] = (runs[-1][0] + 1, v)
        else:
            runs.append((1, v))
    return runs


def _encode_values_rle(kind: TypeKind, values: list) -> bytes:
    runs = _runs(values)
    parts = [_u32.pack(len(runs))]
    for count, v in runs:
        parts.append(_u32.pack(count))
        parts.append(_encode_one(kind, v))
    return b"".join(parts)


def _encode_chunk(ctype: ColumnType, values: list) -> tuple[bytes, ChunkMeta]:
    non_null = [v for v in values if v is not None]
    bitmap = _null_bitmap(values)
    plain = _encode_values_plain(ctype.kind, non_null) if non_null else b""
    rle = _encode_values_rle(ctype.kind, non_null) if non_null else None
    if rle is not None and len(rle) < len(plain):
        tag, payload = RLE, rle
    else:
        tag, payload = PLAIN, plain
    data = bytes([tag]) + bitmap + payload
    meta = ChunkMeta(
        offset=-1,
        length=len(data),
        min_value=min(non_null) if non_null else None,
        max_value=max(non_null) if non_null else None,
        null_count=len(values) - len(non_null),
    )
    return data, meta


def decode_chunk(ctype: ColumnType, data: bytes, nrows: int) -> list:
    tag = data[0]
    bm_len = (nrows + 7) // 8
    bitmap = data[1 : 1 + bm_len]
    payload = memoryview(data)[1 + bm_len :]
    null_count = sum(bin(b).count("1") for b in bitmap)
    n_non_null = nrows - null_count
    kind = ctype.kind
    if tag == PLAIN:
        non_null = _decode_values_plain(kind, payload, n_non_null)
    elif tag == RLE:
        non_null = _decode_values_rle(kind, payload)
    else:
        raise CorruptFile(f"unknown chunk encoding tag {tag}")
    if len(non_null) != n_non_null:
        raise CorruptFile("chunk value count does not match null bitmap")
    if null_count == 0:
        return non_null
    out = []
    it = iter(non_null)
    for i in range(nrows):
        if bitmap[i >> 3] & (1 << (i & 7)):
            out.append(None)
        else:
            out.append(next(it))
    return out


def _decode_values_plain(kind: TypeKind, payload: memoryview, count: int) -> list:
    if kind in _INT_KINDS:
        a = array("q")
        a.frombytes(payload[: count * 8])
        return a.tolist()
    if kind is TypeKind.FLOAT64:
        a = array("d")
        a.frombytes(payload[: count * 8])
        return a.tolist()
    if kind is TypeKind.BOOL:
        return [b == 1 for b in payload[:count]]
    (n,) = _u32.unpack_from(payload, 0)
    lengths = array("I")
    lengths.frombytes(payload[4 : 4 + n * 4])
    out = []
    off = 4 + n * 4
    for ln in lengths:
        out.append(bytes(payload[off : off + ln]).decode("utf-8"))
        off += ln
    return out


def _decode_values_rle(kind: TypeKind, payload: memoryview) -> list:
    (n_runs,) = _u32.unpack_from(payload, 0)
    off = 4
    out: list = []
    for _ in range(n_runs):
        (count,) = _u32.unpack_from(payload, off)
        off += 4
        if kind in _INT_KINDS:
            (v,) = _i64.unpack_from(payload, off)
            off += 8
        elif kind is TypeKind.FLOAT64:
            (v,) = _f64.unpack_from(payload, off)
            off += 8
        elif kind is TypeKind.BOOL:
            v = payload[off] == 1
            off += 1
        else:
            (ln,) = _u32.unpack_from(payload, off)
            off += 4
            v = bytes(payload[off : off + ln]).decode("utf-8")
            off += ln
        out.extend([v] * count)
    return out


def encode_column_file(
    types,
    rows,
    *,
    layout: str = LAYOUT_PLAIN,
    row_group_rows: int = ROW_GROUP_ROWS,
    uid: str | None = None,
) -> bytes:
    types = tuple(types)
    rows = list(rows)
    if uid is None:
        uid = secrets.token_hex(8)
    buf = io.BytesIO()
    buf.write(MAGIC)
    groups = []
    for start in range(0, len(rows), row_group_rows):
        chunk_rows = rows[start : start + row_group_rows]
        cols_meta = []
        for ci, ctype in enumerate(types):
            data, meta = _encode_chunk(ctype, [r[ci] for r in chunk_rows])
            offset = buf.tell()
            buf.write(data)
            cols_meta.append(
                [offset, meta.length, meta.min_value, meta.max_value, meta.null_count]
            )
        groups.append({"rows": len(chunk_rows), "cols": cols_meta})
    footer = {
        "uid": uid,
        "layout": layout,
        "types": [_type_to_json(t) for t in types],
        "nrows": len(rows),
        "groups": groups,
    }
    footer_offset = buf.tell()
    buf.write(json.dumps(footer, separators=(",", ":")).encode("utf-8"))
    buf.write(_u64.pack(footer_offset))
    return buf.getvalue()


def _parse_footer(data: bytes, total_length: int) -> FileMeta:
    footer = json.loads(data.decode("utf-8"))
    groups = tuple(
        GroupMeta(
            rows=g["rows"],
            cols=tuple(ChunkMeta(c[0], c[1], c[2], c[3], c[4]) for c in g["cols"]),
        )
        for g in footer["groups"]
    )
    return FileMeta(
        uid=footer["uid"],
        layout=footer["layout"],
        types=tuple(_type_from_json(t) for t in footer["types"]),
        nrows=footer["nrows"],
        groups=groups,
        file_length=total_length,
    )


def read_file_meta(path: Path) -> FileMeta:
    size = os.path.getsize(path)
    if size < len(MAGIC) + 8:
        raise CorruptFile(f"{path}: truncated file")
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise CorruptFile(f"{path}: bad magic")
        f.seek(size - 8)
        (footer_offset,) = _u64.unpack(f.read(8))
        if footer_offset < 4 or footer_offset > size - 8:
            raise CorruptFile(f"{path}: truncated footer")
        f.seek(footer_offset)
        raw = f.read(size - 8 - footer_offset)
    try:
        return _parse_footer(raw, size)
    except (ValueError, KeyError, IndexError) as exc:
        raise CorruptFile(f"{path}: unreadable footer") from exc


def decode_column_file(data: bytes):
    """Full decode; returns (types, rows, layout)."""
    if data[:4] != MAGIC:
        raise CorruptFile("bad magic")
    if len(data) < 12:
        raise CorruptFile("truncated file")
    (footer_offset,) = _u64.unpack(data[-8:])
    if footer_offset < 4 or footer_offset > len(data) - 8:
        raise CorruptFile("truncated footer")
    meta = _parse_footer(data[footer_offset : len(data) - 8], len(data))
    columns_per_group = []
    for g in meta.groups:
        cols = []
        for ctype, cm in zip(meta.types, g.cols):
            chunk = data[cm.offset : cm.offset + cm.length]
            cols.append(decode_chunk(ctype, chunk, g.rows))
        columns_per_group.append((g.rows, cols))
    rows = []
    for nrows, cols in columns_per_group:
        for i in range(nrows):
            rows.append(tuple(col[i] for col in cols))
    return meta.types, rows, meta.layout


def write_column_file(
    path: Path,
    types,
    rows,
    *,
    layout: str = LAYOUT_PLAIN,
    row_group_rows: int = ROW_GROUP_ROWS,
) -> FileMeta:
    data = encode_column_file(types, rows, layout=layout, row_group_rows=row_group_rows)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(data)
    return read_file_meta(path)

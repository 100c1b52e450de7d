"""PLY point cloud I/O.

Supports `format ascii 1.0` and `format binary_little_endian 1.0` with a
vertex element carrying float/double x,y,z, optional uchar red/green/blue,
and an optional integer label. Unknown vertex properties are skipped with a
warning. Read errors carry the byte offset or element index of the failure.

The binary writer stores positions as doubles so that write -> load is
bit-exact for float64 clouds; the reader accepts both float and double.
"""

from __future__ import annotations

import warnings
from pathlib import Path

import numpy as np

from ..errors import PlyError
from .cloud import DEFAULT_COLOR, PointCloud

_PLY_SCALARS = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}

_KNOWN_PROPS = {"x", "y", "z", "red", "green", "blue", "label"}


def _parse_header(raw: bytes, path: str):
    """Returns (format, vertex_count, properties, payload_offset, class_names)."""
    end = raw.find(b"end_header")
    if end < 0:
        raise PlyError(f"{path}: malformed header: missing end_header")
    nl = raw.find(b"\n", end)
    if nl < 0:
        raise PlyError(f"{path}: malformed header: no newline after end_header")
    payload_offset = nl + 1
    try:
        lines = raw[:end].decode("ascii").splitlines()
    except UnicodeDecodeError as e:
        raise PlyError(f"{path}: malformed header: non-ASCII bytes at offset {e.start}") from e
    if not lines or lines[0].strip() != "ply":
        raise PlyError(f"{path}: malformed header: missing 'ply' magic at byte 0")

    fmt = None
    vertex_count = None
    properties: list[tuple[str, str]] = []  # (name, ply type)
    class_names: list[str] | None = None
    current_element = None
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if not parts:
            continue
        kw = parts[0]
        if kw == "format":
            if len(parts) < 3 or parts[1] not in ("ascii", "binary_little_endian"):
                raise PlyError(f"{path}: malformed header line {lineno}: unsupported format {line!r}")
            fmt = parts[1]
        elif kw == "comment":
            # class names round-trip through a structured comment
            if len(parts) >= 3 and parts[1] == "class_names":
                class_names = parts[2].split(",")
        elif kw == "element":
            if len(parts) != 3:
                raise PlyError(f"{path}: malformed header line {lineno}: {line!r}")
            if parts[1] == "vertex":
                try:
                    vertex_count = int(parts[2])
                except ValueError:
                    raise PlyError(f"{path}: malformed header line {lineno}: bad vertex count {parts[2]!r}")
                current_element = "vertex"
            else:
                if vertex_count is None:
                    raise PlyError(
                        f"{path}: element {parts[1]!r} precedes vertex element; unsupported layout"
                    )
                current_element = parts[1]
        elif kw == "property":
            if current_element != "vertex":
                continue
            if parts[1] == "list":
                raise PlyError(f"{path}: malformed header line {lineno}: list property on vertex")
            if len(parts) != 3 or parts[1] not in _PLY_SCALARS:
                raise PlyError(f"{path}: malformed header line {lineno}: bad property {line!r}")
            properties.append((parts[2], parts[1]))
        elif kw in ("ply", "obj_info"):
            continue
        else:
            raise PlyError(f"{path}: malformed header line {lineno}: unknown keyword {kw!r}")

    if fmt is None:
        raise PlyError(f"{path}: malformed header: no format line")
    if vertex_count is None:
        raise PlyError(f"{path}: malformed header: no vertex element")
    names = [n for n, _ in properties]
    for axis in ("x", "y", "z"):
        if axis not in names:
            raise PlyError(f"{path}: vertex element is missing required property '{axis}'")
    return fmt, vertex_count, properties, payload_offset, class_names


def load_cloud(path) -> PointCloud:
    """Parse a PLY file into a PointCloud.

    Colors default to (128,128,128) when the file has no red/green/blue;
    labels are attached only when an integer `label` property is present.
    """
    path = str(path)
    raw = Path(path).read_bytes()
    fmt, n, properties, payload_offset, class_names = _parse_header(raw, path)

    unknown = [name for name, _ in properties if name not in _KNOWN_PROPS]
    if unknown:
        warnings.warn(f"{path}: skipping unknown vertex properties: {', '.join(unknown)}")

    if fmt == "binary_little_endian":
        dtype = np.dtype([(name, "<" + _PLY_SCALARS[t]) for name, t in properties])
        need = n * dtype.itemsize
        have = len(raw) - payload_offset
        if have < need:
            got_vertices = have // dtype.itemsize if dtype.itemsize else 0
            raise PlyError(
                f"{path}: truncated payload at byte {payload_offset + have}: "
                f"expected {need} bytes ({n} vertices), found {have} "
                f"(~{got_vertices} complete vertices)"
            )
        table = np.frombuffer(raw, dtype=dtype, count=n, offset=payload_offset)
    else:
        text = raw[payload_offset:].decode("ascii", errors="replace")
        rows = [ln.split() for ln in text.splitlines() if ln.strip()]
        if len(rows) < n:
            raise PlyError(
                f"{path}: truncated payload: expected {n} vertices, found {len(rows)} data rows"
            )
        dtype = np.dtype([(name, "<" + _PLY_SCALARS[t]) for name, t in properties])
        table = np.zeros(n, dtype=dtype)
        ncols = len(properties)
        for i in range(n):
            row = rows[i]
            if len(row) < ncols:
                raise PlyError(
                    f"{path}: element {i}: expected {ncols} columns, found {len(row)}"
                )
            for (name, t), tok in zip(properties, row):
                try:
                    table[name][i] = float(tok) if _PLY_SCALARS[t][0] == "f" else int(tok)
                except ValueError:
                    raise PlyError(f"{path}: element {i}: cannot parse {tok!r} as {t}")

    positions = np.stack(
        [table["x"].astype(np.float64), table["y"].astype(np.float64), table["z"].astype(np.float64)],
        axis=1,
    )
    finite = np.isfinite(positions).all(axis=1)
    if not finite.all():
        idx = int(np.flatnonzero(~finite)[0])
        where = f"element {idx}"
        if fmt == "binary_little_endian":
            where += f" (byte offset {payload_offset + idx * dtype.itemsize})"
        raise PlyError(f"{path}: non-finite coordinate at {where}")

    names = [name for name, _ in properties]
    if all(c in names for c in ("red", "green", "blue")):
        colors = np.stack([table["red"], table["green"], table["blue"]], axis=1).astype(np.uint8)
    else:
        colors = np.full((n, 3), DEFAULT_COLOR, dtype=np.uint8)

    labels = table["label"].astype(np.int32) if "label" in names else None
    return PointCloud(positions=positions, colors=colors, labels=labels, class_names=class_names)


def write_cloud(cloud: PointCloud, path, binary: bool = True) -> None:
    """Write a PointCloud as PLY.

    Binary mode stores double-precision positions (lossless for float64);
    ASCII mode prints positions with 17 significant digits so a re-read
    reproduces them to printed precision.
    """
    path = str(path)
    n = len(cloud)
    has_labels = cloud.labels is not None
    header = ["ply"]
    header.append("format binary_little_endian 1.0" if binary else "format ascii 1.0")
    if cloud.class_names:
        header.append("comment class_names " + ",".join(cloud.class_names))
    header.append(f"element vertex {n}")
    # positions are float64 in memory; declaring double keeps reads lossless
    header += [f"property double {ax}" for ax in "xyz"]
    header += [f"property uchar {c}" for c in ("red", "green", "blue")]
    if has_labels:
        header.append("property int label")
    header.append("end_header")

    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fields = [("x", "<f8"), ("y", "<f8"), ("z", "<f8"),
                      ("red", "u1"), ("green", "u1"), ("blue", "u1")]
            if has_labels:
                fields.append(("label", "<i4"))
            rec = np.zeros(n, dtype=np.dtype(fields))
            rec["x"], rec["y"], rec["z"] = cloud.positions.T
            rec["red"], rec["green"], rec["blue"] = cloud.colors.T
            if has_labels:
                rec["label"] = cloud.labels
            f.write(rec.tobytes())
        else:
            lines = []
            for i in range(n):
                x, y, z = cloud.positions[i]
                r, g, b = cloud.colors[i]
                row = f"{x:.17g} {y:.17g} {z:.17g} {r} {g} {b}"
                if has_labels:
                    row += f" {cloud.labels[i]}"
                lines.append(row)
            f.write(("\n".join(lines) + "\n").encode("ascii"))

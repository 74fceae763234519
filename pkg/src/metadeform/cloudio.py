"""ASCII OBJ / PLY / xyz point-cloud reading and writing.

Only vertex positions are read; faces and other elements are skipped.
OBJ and PLY are written with 9 significant digits.  xyz is written with the
shortest round-trip representation so that save/load is bit-exact.
"""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import EmptyCloudError, FormatError
from .geometry import PointCloud, as_points

FORMATS = ("obj", "ply", "xyz")


def infer_format(path):
    ext = Path(path).suffix.lower().lstrip(".")
    if ext not in FORMATS:
        raise FormatError(f"cannot infer point-cloud format from {str(path)!r}")
    return ext


def _lines_with_offsets(data):
    offset = 0
    for lineno, raw in enumerate(data.split(b"\n"), start=1):
        yield lineno, offset, raw.decode("ascii", errors="replace").strip()
        offset += len(raw) + 1


def _floats(fields, lineno, offset, what):
    try:
        return [float(f) for f in fields]
    except ValueError:
        raise FormatError(f"non-numeric {what} coordinate", line=lineno, offset=offset) from None


def _parse_obj(data):
    pts = []
    for lineno, offset, line in _lines_with_offsets(data):
        if not line.startswith("v ") and line != "v":
            continue
        fields = line.split()[1:]
        if len(fields) < 3:
            raise FormatError("vertex line needs 3 coordinates", line=lineno, offset=offset)
        pts.append(_floats(fields[:3], lineno, offset, "vertex"))
    return pts


def _parse_xyz(data):
    pts = []
    for lineno, offset, line in _lines_with_offsets(data):
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 3:
            raise FormatError(f"expected 3 values, got {len(fields)}", line=lineno, offset=offset)
        pts.append(_floats(fields, lineno, offset, "point"))
    return pts


def _parse_ply(data):
    lines = iter(_lines_with_offsets(data))
    lineno, offset, line = next(lines)
    if line != "ply":
        raise FormatError("missing 'ply' magic", line=lineno, offset=offset)
    elements = []  # [name, count, [property names]]
    fmt = None
    for lineno, offset, line in lines:
        fields = line.split()
        if not fields or fields[0] in ("comment", "obj_info"):
            continue
        if fields[0] == "format":
            fmt = fields[1] if len(fields) > 1 else None
            if fmt != "ascii":
                raise FormatError(f"only ASCII PLY is supported, got {fmt!r}", line=lineno, offset=offset)
        elif fields[0] == "element":
            if len(fields) != 3 or not fields[2].isdigit():
                raise FormatError("malformed element line", line=lineno, offset=offset)
            elements.append([fields[1], int(fields[2]), []])
        elif fields[0] == "property":
            if not elements:
                raise FormatError("property before any element", line=lineno, offset=offset)
            elements[-1][2].append(fields[-1])
        elif fields[0] == "end_header":
            break
        else:
            raise FormatError(f"unexpected header keyword {fields[0]!r}", line=lineno, offset=offset)
    else:
        raise FormatError("header not terminated by end_header", offset=len(data))
    if fmt is None:
        raise FormatError("header has no format line")
    pts = []
    for name, count, props in elements:
        if name == "vertex":
            try:
                cols = [props.index(c) for c in ("x", "y", "z")]
            except ValueError:
                raise FormatError("vertex element lacks x/y/z properties") from None
        remaining = count
        while remaining:
            try:
                lineno, offset, line = next(lines)
            except StopIteration:
                raise FormatError(
                    f"file truncated: {remaining} more '{name}' rows expected", offset=len(data)
                ) from None
            if not line:
                continue
            remaining -= 1
            if name != "vertex":
                continue
            fields = line.split()
            if len(fields) < len(props):
                raise FormatError(f"vertex row has {len(fields)} values, header declares {len(props)}",
                                  line=lineno, offset=offset)
            pts.append(_floats([fields[c] for c in cols], lineno, offset, "vertex"))
    return pts


_PARSERS = {"obj": _parse_obj, "ply": _parse_ply, "xyz": _parse_xyz}


def load_cloud(path, format=None):
    """Read the vertices of an OBJ, ASCII PLY or xyz file, in file order."""
    fmt = format or infer_format(path)
    if fmt not in _PARSERS:
        raise FormatError(f"unknown format {fmt!r}")
    data = Path(path).read_bytes()
    pts = _PARSERS[fmt](data)
    if not pts:
        raise EmptyCloudError(f"{path}: no vertices")
    return PointCloud(np.array(pts, dtype=float), name=Path(path).stem)


def format_cloud(cloud, format):
    pts = as_points(cloud, allow_empty=True)
    if format == "xyz":
        return "".join(f"{x!r} {y!r} {z!r}\n" for x, y, z in pts.astype(float).tolist())
    rows = "".join(f"{x:.9g} {y:.9g} {z:.9g}\n" for x, y, z in pts.tolist())
    if format == "obj":
        return "".join(f"v {r}" for r in rows.splitlines(True))
    if format == "ply":
        header = (
            "ply\nformat ascii 1.0\n"
            f"element vertex {len(pts)}\n"
            "property float x\nproperty float y\nproperty float z\nend_header\n"
        )
        return header + rows
    raise FormatError(f"unknown format {format!r}")


def atomic_write_text(path, text):
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    if not str(path) or path.name == "":
        raise OSError("empty output path")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_cloud(cloud, path, format=None):
    if path is None or str(path) == "":
        raise OSError("empty output path")
    fmt = format or infer_format(path)
    atomic_write_text(path, format_cloud(cloud, fmt))

"""Point-cloud files: XYZ text and PLY (ASCII or binary little-endian).

Only vertex coordinates are read; any other vertex properties and any
other elements are skipped.
"""

from pathlib import Path

import numpy as np

from lahreg.validation import check_cloud

PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}  # fmt: skip


class CloudParseError(ValueError):
    """Malformed point-cloud file.

    Exactly one of ``line`` (1-based text line) or ``offset`` (byte offset
    into the file) locates the problem.
    """

    def __init__(self, path, message, line=None, offset=None):
        self.path = str(path)
        self.line = line
        self.offset = offset
        where = f"line {line}" if line is not None else f"byte {offset}"
        super().__init__(f"{path}: {where}: {message}")


class CloudFormatError(ValueError):
    """Unsupported file extension or format name."""


def _format_of(path, fmt=None):
    if fmt is not None:
        if fmt not in ("xyz", "ply", "ply-ascii"):
            raise CloudFormatError(f"unknown point-cloud format {fmt!r}")
        return fmt
    ext = Path(path).suffix.lower()
    if ext == ".xyz":
        return "xyz"
    if ext == ".ply":
        return "ply"
    raise CloudFormatError(f"{path}: unknown point-cloud extension {ext!r} (expected .xyz or .ply)")


def read_cloud(path):
    """Read an ``(N, 3)`` float64 array from a ``.xyz`` or ``.ply`` file."""
    if _format_of(path) == "xyz":
        return _read_xyz(path)
    return _read_ply(path)


def write_cloud(path, points, fmt=None):
    """Write points as XYZ text, binary PLY (default for ``.ply``) or ``"ply-ascii"``.

    Binary PLY stores doubles and round-trips bit for bit; the text formats
    print 17 significant digits, which also round-trips exactly.
    """
    P = check_cloud(points)
    kind = _format_of(path, fmt)
    if kind == "xyz":
        np.savetxt(path, P, fmt="%.17g")
        return
    header = [
        "ply",
        "format " + ("ascii" if kind == "ply-ascii" else "binary_little_endian") + " 1.0",
        f"element vertex {len(P)}",
        "property double x",
        "property double y",
        "property double z",
        "end_header",
    ]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if kind == "ply-ascii":
            for p in P:
                fh.write(("%.17g %.17g %.17g\n" % tuple(p)).encode("ascii"))
        else:
            fh.write(np.ascontiguousarray(P, dtype="<f8").tobytes())


def _read_xyz(path):
    rows = []
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            parts = text.replace(",", " ").split()
            if len(parts) < 3:
                raise CloudParseError(path, f"expected 3 coordinates, got {len(parts)}", line=lineno)
            try:
                rows.append([float(v) for v in parts[:3]])
            except ValueError as exc:
                raise CloudParseError(path, str(exc), line=lineno) from None
    return check_cloud(np.asarray(rows, dtype=np.float64).reshape(-1, 3))


def _parse_ply_header(path, raw):
    """Return ``(format, elements, data_offset)``.

    ``elements`` is a list of ``(name, count, properties)`` where each
    property is ``(name, dtype)`` or ``(name, (count_dtype, item_dtype))``
    for list properties.
    """
    end = raw.find(b"end_header")
    if not raw.startswith(b"ply") or end < 0:
        raise CloudParseError(path, "missing 'ply' magic or 'end_header'", line=1)
    nl = raw.find(b"\n", end)
    data_offset = len(raw) if nl < 0 else nl + 1
    lines = raw[:end].decode("ascii", errors="replace").splitlines()
    fmt, elements = None, []
    for lineno, line in enumerate(lines, start=1):
        parts = line.split()
        if not parts or parts[0] in ("ply", "comment", "obj_info"):
            continue
        if parts[0] == "format":
            if len(parts) < 2 or parts[1] not in ("ascii", "binary_little_endian"):
                raise CloudParseError(path, f"unsupported format line {line!r}", line=lineno)
            fmt = parts[1]
        elif parts[0] == "element":
            if len(parts) != 3 or not parts[2].isdigit():
                raise CloudParseError(path, f"bad element line {line!r}", line=lineno)
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise CloudParseError(path, "property before any element", line=lineno)
            if len(parts) == 5 and parts[1] == "list":
                if parts[2] not in PLY_TYPES or parts[3] not in PLY_TYPES:
                    raise CloudParseError(path, f"unknown list types in {line!r}", line=lineno)
                elements[-1][2].append((parts[4], (PLY_TYPES[parts[2]], PLY_TYPES[parts[3]])))
            elif len(parts) == 3 and parts[1] in PLY_TYPES:
                elements[-1][2].append((parts[2], PLY_TYPES[parts[1]]))
            else:
                raise CloudParseError(path, f"bad property line {line!r}", line=lineno)
        else:
            raise CloudParseError(path, f"unexpected header keyword {parts[0]!r}", line=lineno)
    if fmt is None:
        raise CloudParseError(path, "header has no format line", line=len(lines) + 1)
    return fmt, elements, data_offset, len(lines) + 1


def _vertex_columns(path, props, header_line):
    names = [p[0] for p in props]
    missing = [c for c in "xyz" if c not in names]
    if missing:
        raise CloudParseError(path, f"vertex element lacks {missing}", line=header_line)
    return [names.index(c) for c in "xyz"]


def _read_ply(path):
    raw = Path(path).read_bytes()
    fmt, elements, offset, end_line = _parse_ply_header(path, raw)
    if not any(e[0] == "vertex" for e in elements):
        raise CloudParseError(path, "no vertex element", line=end_line)
    if fmt == "ascii":
        return _read_ply_ascii(path, raw[offset:], elements, end_line + 1)
    return _read_ply_binary(path, raw, offset, elements, end_line)


def _read_ply_ascii(path, body, elements, first_line):
    lines = body.decode("ascii", errors="replace").splitlines()
    cursor = 0
    for name, count, props in elements:
        if name != "vertex":
            cursor += count
            continue
        cols = _vertex_columns(path, props, first_line - 1)
        out = np.empty((count, 3))
        for k in range(count):
            lineno = first_line + cursor + k
            if cursor + k >= len(lines):
                raise CloudParseError(path, f"expected {count} vertices, file ended", line=lineno)
            parts = lines[cursor + k].split()
            if len(parts) < len(props):
                raise CloudParseError(path, f"expected {len(props)} values, got {len(parts)}", line=lineno)
            try:
                out[k] = [float(parts[c]) for c in cols]
            except ValueError as exc:
                raise CloudParseError(path, str(exc), line=lineno) from None
        return check_cloud(out)
    raise AssertionError("unreachable")


def _read_ply_binary(path, raw, offset, elements, end_line):
    for name, count, props in elements:
        if name == "vertex":
            if any(isinstance(t, tuple) for _, t in props):
                raise CloudParseError(path, "list properties on vertices are not supported", line=end_line)
            cols = _vertex_columns(path, props, end_line)
            dtype = np.dtype([(p, "<" + t) for p, t in props])
            need = offset + count * dtype.itemsize
            if len(raw) < need:
                raise CloudParseError(
                    path, f"vertex data truncated: need {need} bytes, file has {len(raw)}", offset=len(raw)
                )
            data = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
            names = [p[0] for p in props]
            return check_cloud(np.column_stack([data[names[c]].astype(np.float64) for c in cols]))
        offset = _skip_binary_element(path, raw, offset, count, props)
    raise AssertionError("unreachable")


def _skip_binary_element(path, raw, offset, count, props):
    if not any(isinstance(t, tuple) for _, t in props):
        return offset + count * sum(np.dtype(t).itemsize for _, t in props)
    for _ in range(count):
        for _, t in props:
            if isinstance(t, tuple):
                ct, it = np.dtype("<" + t[0]), np.dtype("<" + t[1])
                if offset + ct.itemsize > len(raw):
                    raise CloudParseError(path, "element data truncated", offset=offset)
                n = int(np.frombuffer(raw, dtype=ct, count=1, offset=offset)[0])
                offset += ct.itemsize + n * it.itemsize
            else:
                offset += np.dtype(t).itemsize
    return offset

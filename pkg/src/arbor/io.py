"""File formats shared across stages: PGM/PNG images, PLY point sets, OBJ meshes, JSON."""
from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

from . import InvalidArgument


def atomic_write_bytes(path, data: bytes) -> None:
    """Write ``data`` to ``path`` through a temp file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def dumps_json(obj) -> str:
    # sorted keys + fixed separators keep outputs byte-stable
    return json.dumps(obj, sort_keys=True, indent=2, separators=(",", ": ")) + "\n"


def write_json(path, obj) -> None:
    atomic_write_text(path, dumps_json(obj))


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


# -- images -----------------------------------------------------------------

def _read_pgm_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    while True:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        break
    start = pos
    while pos < len(buf) and not buf[pos:pos + 1].isspace():
        pos += 1
    return buf[start:pos], pos


def read_pgm(path) -> np.ndarray:
    """Read a binary (P5) PGM file into a float array in [0, 1] of shape (h, w)."""
    buf = Path(path).read_bytes()
    magic, pos = _read_pgm_token(buf, 0)
    if magic != b"P5":
        raise InvalidArgument(f"{path}: not a binary PGM (magic {magic!r})")
    width, pos = _read_pgm_token(buf, pos)
    height, pos = _read_pgm_token(buf, pos)
    maxval, pos = _read_pgm_token(buf, pos)
    w, h, mv = int(width), int(height), int(maxval)
    pos += 1  # single whitespace after maxval
    dtype = np.dtype(">u2") if mv > 255 else np.dtype("u1")
    data = np.frombuffer(buf, dtype=dtype, count=w * h, offset=pos)
    return data.reshape(h, w).astype(np.float64) / mv


def write_pgm(path, values: np.ndarray) -> None:
    """Write a 2-D array in [0, 1] as an 8-bit P5 PGM."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise InvalidArgument("PGM output must be a single-channel 2-D array")
    h, w = values.shape
    data = np.round(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)
    atomic_write_bytes(path, f"P5\n{w} {h}\n255\n".encode("ascii") + data.tobytes())


def read_image_array(path) -> np.ndarray:
    """Read PGM or PNG (or anything Pillow reads) to floats in [0, 1].

    Returns shape (h, w) for grayscale and (h, w, 3) for colour inputs.
    """
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        return read_pgm(path)
    from PIL import Image as PILImage

    with PILImage.open(path) as im:
        if im.mode in ("L", "1", "I;16", "I"):
            arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
        else:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr


def write_image_array(path, values: np.ndarray) -> None:
    path = Path(path)
    values = np.asarray(values, dtype=np.float64)
    if path.suffix.lower() == ".pgm":
        write_pgm(path, values)
        return
    from PIL import Image as PILImage
    import io as _io

    data = np.round(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)
    buf = _io.BytesIO()
    PILImage.fromarray(data).save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


# -- PLY ----------------------------------------------------------------------

def write_ply(path, points: np.ndarray, normals: np.ndarray | None = None, comments=()) -> None:
    """Write an ASCII PLY vertex list, optionally with per-vertex normals."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    lines = ["ply", "format ascii 1.0"]
    lines += [f"comment {c}" for c in comments]
    lines += [f"element vertex {len(points)}", "property double x", "property double y", "property double z"]
    cols = [points]
    if normals is not None:
        normals = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
        lines += ["property double nx", "property double ny", "property double nz"]
        cols.append(normals)
    lines.append("end_header")
    body = np.hstack(cols)
    lines += [" ".join(repr(float(v)) for v in row) for row in body]
    atomic_write_text(path, "\n".join(lines) + "\n")


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def read_ply_points(path) -> np.ndarray:
    """Read the x, y, z vertex properties of an ASCII or binary PLY file.

    Only the vertex element is decoded; list properties on the vertex element
    are not supported.
    """
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header")
    if not raw.startswith(b"ply") or end < 0:
        raise InvalidArgument(f"{path}: not a PLY file")
    body_start = raw.index(b"\n", end) + 1
    header = raw[:end].decode("ascii").splitlines()
    fmt = None
    elements: list[tuple[str, int, list[tuple[str, str]]]] = []
    for line in header:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if parts[1] == "list":
                raise InvalidArgument(f"{path}: list properties are not supported")
            elements[-1][2].append((parts[2], _PLY_TYPES[parts[1]]))
    if not elements or elements[0][0] != "vertex":
        raise InvalidArgument(f"{path}: first element must be 'vertex'")
    _, count, props = elements[0]
    names = [p[0] for p in props]
    if not {"x", "y", "z"} <= set(names):
        raise InvalidArgument(f"{path}: vertex element lacks x/y/z")
    if fmt == "ascii":
        rows = raw[body_start:].decode("ascii").split("\n")
        vals = np.array([r.split() for r in rows[:count]], dtype=np.float64).reshape(count, len(props))
        cols = {n: vals[:, i] for i, n in enumerate(names)}
    elif fmt in ("binary_little_endian", "binary_big_endian"):
        order = "<" if fmt == "binary_little_endian" else ">"
        dt = np.dtype([(n, order + t) for n, t in props])
        rec = np.frombuffer(raw, dtype=dt, count=count, offset=body_start)
        cols = {n: rec[n].astype(np.float64) for n in names}
    else:
        raise InvalidArgument(f"{path}: unknown PLY format {fmt!r}")
    return np.stack([cols["x"], cols["y"], cols["z"]], axis=1)


def write_obj(path, vertices: np.ndarray, faces: np.ndarray, comments=()) -> None:
    """Write a triangle mesh as ASCII OBJ (1-based face indices)."""
    out = [f"# {c}" for c in comments]
    out += [f"v {x!r} {y!r} {z!r}" for x, y, z in np.asarray(vertices, dtype=np.float64).tolist()]
    out += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in np.asarray(faces, dtype=np.int64).tolist()]
    atomic_write_text(path, "\n".join(out) + "\n")

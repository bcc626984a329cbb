"""Readers and writers for point clouds, rasters, meshes and camera poses.

Formats are deliberately small and strict:

* PLY (ascii / binary_little_endian), element ``vertex`` with float32/float64
  x y z, optional uchar red green blue, optional float nx ny nz, and an
  optional ``face`` element (uchar-counted int vertex lists) for meshes.
* HGT1, a bespoke raster container: a UTF-8 header followed by one float32
  little-endian row-major plane per band, row 0 holding the max-y row.
* A whitespace text table for camera poses.

All writers are deterministic; readers reject truncated or trailing bytes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ParseError, UnsupportedFormatError, ValidationError, InputError
from .geom import HeightGrid, PerspectiveCamera, PointCloud, TriMesh

_PLY_VERTEX_PROPS = {
    "x": ("float", "double"),
    "y": ("float", "double"),
    "z": ("float", "double"),
    "red": ("uchar",),
    "green": ("uchar",),
    "blue": ("uchar",),
    "nx": ("float", "double"),
    "ny": ("float", "double"),
    "nz": ("float", "double"),
}

_NUMPY_OF_PLY = {"float": "<f4", "double": "<f8", "uchar": "u1", "int": "<i4"}


# --------------------------------------------------------------------------- PLY


def _format_ascii_float(v: float) -> str:
    return f"{v:.9g}"


def write_ply(cloud: PointCloud, path, binary: bool = True) -> None:
    """Write a point cloud as float32 PLY; colors/normals emitted when present."""
    _write_ply_impl(path, cloud.points, cloud.colors, cloud.normals, None, binary)


def write_mesh_ply(mesh: TriMesh, path, binary: bool = True) -> None:
    """Write a triangle mesh (vertex + face elements)."""
    _write_ply_impl(path, mesh.vertices, None, None, mesh.faces, binary)


def _write_ply_impl(path, pts, colors, normals, faces, binary):
    n = len(pts)
    lines = ["ply"]
    lines.append("format binary_little_endian 1.0" if binary else "format ascii 1.0")
    lines.append(f"element vertex {n}")
    lines += ["property float x", "property float y", "property float z"]
    if colors is not None:
        lines += ["property uchar red", "property uchar green", "property uchar blue"]
    if normals is not None:
        lines += ["property float nx", "property float ny", "property float nz"]
    if faces is not None:
        lines.append(f"element face {len(faces)}")
        lines.append("property list uchar int vertex_indices")
    lines.append("end_header")
    header = ("\n".join(lines) + "\n").encode("ascii")

    xyz = np.asarray(pts, dtype="<f4")
    nrm = np.asarray(normals, dtype="<f4") if normals is not None else None
    with open(path, "wb") as fh:
        fh.write(header)
        if binary:
            fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
            if colors is not None:
                fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
            if normals is not None:
                fields += [("nx", "<f4"), ("ny", "<f4"), ("nz", "<f4")]
            rec = np.zeros(n, dtype=fields)
            rec["x"], rec["y"], rec["z"] = xyz[:, 0], xyz[:, 1], xyz[:, 2]
            if colors is not None:
                rec["red"], rec["green"], rec["blue"] = colors[:, 0], colors[:, 1], colors[:, 2]
            if normals is not None:
                rec["nx"], rec["ny"], rec["nz"] = nrm[:, 0], nrm[:, 1], nrm[:, 2]
            fh.write(rec.tobytes())
            if faces is not None:
                frec = np.zeros(len(faces), dtype=[("n", "u1"), ("i", "<i4", (3,))])
                frec["n"] = 3
                frec["i"] = np.asarray(faces, dtype="<i4")
                fh.write(frec.tobytes())
        else:
            out = []
            for i in range(n):
                parts = [_format_ascii_float(float(v)) for v in xyz[i]]
                if colors is not None:
                    parts += [str(int(v)) for v in colors[i]]
                if normals is not None:
                    parts += [_format_ascii_float(float(v)) for v in nrm[i]]
                out.append(" ".join(parts))
            if faces is not None:
                for f in np.asarray(faces, dtype=np.int64):
                    out.append("3 " + " ".join(str(int(v)) for v in f))
            if out:
                fh.write(("\n".join(out) + "\n").encode("ascii"))


def _parse_ply_header(data: bytes, path):
    end = data.find(b"end_header\n")
    if end < 0:
        raise ParseError(f"{path}: missing end_header")
    header_text = data[:end].decode("ascii", errors="replace")
    if header_text.endswith("\n"):
        header_text = header_text[:-1]
    header_lines = header_text.split("\n")
    body = data[end + len(b"end_header\n"):]

    if not header_lines or header_lines[0].strip() != "ply":
        raise ParseError(f"{path}: line 1: not a PLY file (magic missing)")
    fmt = None
    elements = []  # (name, count, [(prop_name, type)] )
    for lineno, raw in enumerate(header_lines[1:], start=2):
        tok = raw.split()
        if not tok:
            raise ParseError(f"{path}: line {lineno}: empty header line")
        if tok[0] == "comment":
            continue
        if tok[0] == "format":
            if len(tok) != 3 or tok[2] != "1.0":
                raise ParseError(f"{path}: line {lineno}: bad format line")
            if tok[1] not in ("ascii", "binary_little_endian"):
                raise UnsupportedFormatError(f"{path}: line {lineno}: format {tok[1]} unsupported")
            fmt = tok[1]
        elif tok[0] == "element":
            if len(tok) != 3:
                raise ParseError(f"{path}: line {lineno}: bad element line")
            try:
                count = int(tok[2])
            except ValueError:
                raise ParseError(f"{path}: line {lineno}: bad element count {tok[2]!r}")
            if count < 0:
                raise ParseError(f"{path}: line {lineno}: negative element count")
            elements.append([tok[1], count, []])
        elif tok[0] == "property":
            if not elements:
                raise ParseError(f"{path}: line {lineno}: property before element")
            ename = elements[-1][0]
            if tok[1] == "list":
                if ename != "face" or tok[2:] != ["uchar", "int", "vertex_indices"]:
                    raise UnsupportedFormatError(
                        f"{path}: line {lineno}: unsupported list property {raw.strip()!r}"
                    )
                elements[-1][2].append(("vertex_indices", "list"))
            else:
                if len(tok) != 3:
                    raise ParseError(f"{path}: line {lineno}: bad property line")
                ptype, pname = tok[1], tok[2]
                if ename == "vertex":
                    if pname not in _PLY_VERTEX_PROPS:
                        raise UnsupportedFormatError(
                            f"{path}: line {lineno}: unsupported vertex property {pname!r}"
                        )
                    if ptype not in _PLY_VERTEX_PROPS[pname]:
                        raise UnsupportedFormatError(
                            f"{path}: line {lineno}: property {pname} has unsupported type {ptype}"
                        )
                elements[-1][2].append((pname, ptype))
        else:
            raise ParseError(f"{path}: line {lineno}: unknown header keyword {tok[0]!r}")
    if fmt is None:
        raise ParseError(f"{path}: missing format line")
    return fmt, elements, body


def _read_ply_raw(path):
    with open(path, "rb") as fh:
        data = fh.read()
    fmt, elements, body = _parse_ply_header(data, path)
    vertex = next((e for e in elements if e[0] == "vertex"), None)
    if vertex is None:
        raise ParseError(f"{path}: no vertex element")
    face = next((e for e in elements if e[0] == "face"), None)
    for e in elements:
        if e[0] not in ("vertex", "face"):
            raise UnsupportedFormatError(f"{path}: unsupported element {e[0]!r}")

    nvert, props = vertex[1], vertex[2]
    names = [p[0] for p in props]
    for req in ("x", "y", "z"):
        if req not in names:
            raise ParseError(f"{path}: vertex element lacks property {req!r}")
    nface = face[1] if face is not None else None

    if fmt == "binary_little_endian":
        vdtype = np.dtype([(p, _NUMPY_OF_PLY[t]) for p, t in props])
        need = nvert * vdtype.itemsize
        fdtype = np.dtype([("n", "u1"), ("i", "<i4", (3,))])
        need_total = need + (nface * fdtype.itemsize if nface is not None else 0)
        if len(body) != need_total:
            raise ParseError(
                f"{path}: body byte count mismatch: expected {need_total}, got {len(body)}"
            )
        rec = np.frombuffer(body[:need], dtype=vdtype)
        fidx = None
        if nface is not None:
            frec = np.frombuffer(body[need:], dtype=fdtype)
            if nface and not np.all(frec["n"] == 3):
                raise UnsupportedFormatError(f"{path}: only triangle faces supported")
            fidx = frec["i"].astype(np.int64).reshape(-1, 3)
        cols = {p: np.asarray(rec[p]) for p, _ in props}
    else:
        text = body.decode("ascii", errors="replace")
        if text and not text.endswith("\n"):
            raise ParseError(f"{path}: body not newline-terminated (truncated?)")
        lines = text.split("\n")[:-1] if text else []
        need_lines = nvert + (nface or 0)
        if len(lines) != need_lines:
            raise ParseError(f"{path}: expected {need_lines} body lines, got {len(lines)}")
        cols = {p: np.empty(nvert, dtype=np.float64) for p, _ in props}
        for i in range(nvert):
            tok = lines[i].split()
            if len(tok) != len(props):
                raise ParseError(f"{path}: vertex line {i}: expected {len(props)} values")
            try:
                for (p, _), s in zip(props, tok):
                    cols[p][i] = float(s)
            except ValueError:
                raise ParseError(f"{path}: vertex line {i}: bad number")
        fidx = None
        if nface is not None:
            fidx = np.empty((nface, 3), dtype=np.int64)
            for i in range(nface):
                tok = lines[nvert + i].split()
                if len(tok) != 4 or tok[0] != "3":
                    raise UnsupportedFormatError(f"{path}: face line {i}: only triangles supported")
                try:
                    fidx[i] = [int(t) for t in tok[1:]]
                except ValueError:
                    raise ParseError(f"{path}: face line {i}: bad index")

    pts = np.column_stack([np.asarray(cols["x"], dtype=np.float64),
                           np.asarray(cols["y"], dtype=np.float64),
                           np.asarray(cols["z"], dtype=np.float64)])
    colors = None
    if all(c in cols for c in ("red", "green", "blue")):
        colors = np.column_stack([cols["red"], cols["green"], cols["blue"]]).astype(np.uint8)
    normals = None
    if all(c in cols for c in ("nx", "ny", "nz")):
        normals = np.column_stack([cols["nx"], cols["ny"], cols["nz"]]).astype(np.float64)
        lens = np.linalg.norm(normals, axis=1)
        lens[lens == 0] = 1.0
        normals = normals / lens[:, None]  # re-unit after float32 quantization
    return pts, colors, normals, fidx


def read_ply(path) -> PointCloud:
    """Read a PLY point cloud (faces, if any, are ignored)."""
    pts, colors, normals, _ = _read_ply_raw(path)
    return PointCloud(pts, colors=colors, normals=normals)


def read_mesh_ply(path) -> TriMesh:
    pts, _, _, faces = _read_ply_raw(path)
    if faces is None:
        raise ParseError(f"{path}: no face element in mesh file")
    return TriMesh(pts, faces)


# -------------------------------------------------------------------------- HGT1


def write_grid(grid: HeightGrid, path) -> None:
    names = list(grid.bands)
    header = (
        "HGT1\n"
        f"width {grid.width}\n"
        f"height {grid.height}\n"
        f"gsd {grid.gsd:.17g}\n"
        f"origin {grid.origin_x:.17g} {grid.origin_y:.17g}\n"
        f"bands {' '.join(names)}\n"
        "end\n"
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(header)
        for name in names:
            fh.write(np.asarray(grid.bands[name], dtype="<f4").tobytes())


def read_grid(path) -> HeightGrid:
    with open(path, "rb") as fh:
        data = fh.read()
    fields = {}
    pos = 0
    order = ["HGT1", "width", "height", "gsd", "origin", "bands", "end"]
    for lineno, key in enumerate(order, start=1):
        nl = data.find(b"\n", pos)
        if nl < 0:
            raise ParseError(f"{path}: line {lineno}: header truncated before {key!r}")
        line = data[pos:nl].decode("utf-8", errors="replace")
        pos = nl + 1
        tok = line.split()
        if key == "HGT1":
            if line != "HGT1":
                raise ParseError(f"{path}: line 1: bad magic {line!r}")
            continue
        if key == "end":
            if line != "end":
                raise ParseError(f"{path}: line {lineno}: missing end marker")
            continue
        if not tok or tok[0] != key:
            raise ParseError(f"{path}: line {lineno}: expected {key!r} line, got {line!r}")
        fields[key] = tok[1:]
    try:
        w = int(fields["width"][0])
        h = int(fields["height"][0])
        gsd = float(fields["gsd"][0])
        ox, oy = float(fields["origin"][0]), float(fields["origin"][1])
    except (ValueError, IndexError):
        raise ParseError(f"{path}: malformed header values")
    names = fields["bands"]
    if not names:
        raise ParseError(f"{path}: bands line lists no bands")
    need = 4 * w * h * len(names)
    payload = data[pos:]
    if len(payload) != need:
        raise ParseError(f"{path}: payload byte count mismatch: expected {need}, got {len(payload)}")
    bands = {}
    for i, name in enumerate(names):
        raw = payload[i * 4 * w * h:(i + 1) * 4 * w * h]
        bands[name] = np.frombuffer(raw, dtype="<f4").reshape(h, w).copy()
    return HeightGrid(ox, oy, gsd, bands)


# ------------------------------------------------------------------------- poses


@dataclass(frozen=True)
class PoseRecord:
    """One camera pose: pinhole intrinsics plus a unit quaternion and center."""

    frame_id: int
    focal: float
    cx: float
    cy: float
    q: tuple[float, float, float, float]  # (qw, qx, qy, qz), world->camera
    center: tuple[float, float, float]

    def rotation(self) -> np.ndarray:
        return quat_to_matrix(np.asarray(self.q))

    def to_camera(self, width: int, height: int) -> PerspectiveCamera:
        return PerspectiveCamera(
            self.focal, self.cx, self.cy, width, height, self.rotation(), np.asarray(self.center)
        )


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(r: np.ndarray) -> np.ndarray:
    """Rotation matrix to (qw, qx, qy, qz) with non-negative qw."""
    m = np.asarray(r, dtype=float)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        q = np.array([0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s,
                      (m[1, 0] - m[0, 1]) / s])
    elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        q = np.array([(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s,
                      (m[0, 2] + m[2, 0]) / s])
    elif m[1, 1] >= m[2, 2]:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        q = np.array([(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s,
                      (m[1, 2] + m[2, 1]) / s])
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        q = np.array([(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s,
                      (m[1, 2] + m[2, 1]) / s, 0.25 * s])
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def read_poses(path) -> list[PoseRecord]:
    """One record per line: id focal cx cy qw qx qy qz x y z; '#' comments skipped."""
    records = []
    with open(path, "rb") as fh:
        text = fh.read().decode("utf-8", errors="replace")
    for lineno, line in enumerate(text.split("\n"), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        tok = body.split()
        if len(tok) != 11:
            raise ParseError(f"{path}: line {lineno}: expected 11 fields, got {len(tok)}")
        try:
            frame_id = int(tok[0])
            vals = [float(t) for t in tok[1:]]
        except ValueError:
            raise ParseError(f"{path}: line {lineno}: bad number")
        q = vals[3:7]
        norm = math.sqrt(sum(v * v for v in q))
        if abs(norm - 1.0) > 1e-3:
            raise ValidationError(
                f"{path}: line {lineno}: quaternion norm {norm:.6g} not unit within 1e-3"
            )
        q = tuple(v / norm for v in q)
        records.append(
            PoseRecord(frame_id, vals[0], vals[1], vals[2], q, tuple(vals[7:10]))
        )
    return records


def write_poses(records: list[PoseRecord], path) -> None:
    with open(path, "wb") as fh:
        for r in records:
            vals = [r.focal, r.cx, r.cy, *r.q, *r.center]
            fh.write((f"{r.frame_id} " + " ".join(f"{v:.17g}" for v in vals) + "\n").encode())

"""Binary STL and PLY (binary little-endian or ASCII) reading and writing."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from scanrecon.errors import DataError
from scanrecon.surface.mesh import TriangleMesh

STL_FACET = np.dtype([("normal", "<f4", 3), ("v", "<f4", (3, 3)), ("attr", "<u2")])
FORMATS = ("stl-binary", "ply")


def write_stl(path, m: TriangleMesh, header=b"scanrecon binary STL"):
    if m.n_faces == 0:
        raise DataError("refusing to write an empty mesh")
    rec = np.zeros(m.n_faces, dtype=STL_FACET)
    tri = m.vertices[m.faces].astype("<f4")
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]).astype(np.float64)
    ln = np.linalg.norm(n, axis=1, keepdims=True)
    rec["normal"] = np.divide(n, ln, out=np.zeros_like(n), where=ln > 0)
    rec["v"] = tri
    with open(path, "wb") as f:
        f.write(header[:80].ljust(80, b"\0"))
        f.write(struct.pack("<I", m.n_faces))
        f.write(rec.tobytes())


def read_stl(path) -> TriangleMesh:
    """Binary STL; corners with identical coordinates become one vertex."""
    data = Path(path).read_bytes()
    if len(data) < 84:
        raise DataError(f"{path}: too short for binary STL")
    (n,) = struct.unpack_from("<I", data, 80)
    if len(data) != 84 + 50 * n:
        raise DataError(f"{path}: size does not match facet count {n}")
    rec = np.frombuffer(data, dtype=STL_FACET, count=n, offset=84)
    corners = rec["v"].reshape(-1, 3).astype(np.float64)
    verts, inv = np.unique(corners, axis=0, return_inverse=True)
    return TriangleMesh(verts, inv.reshape(-1, 3))


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def write_ply(path, vertices, faces=None, normals=None):
    """Binary little-endian PLY; x,y,z,nx,ny,nz as float32, faces as uchar count + uint32."""
    v = np.asarray(vertices, np.float64).reshape(-1, 3)
    has_n = normals is not None
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if has_n:
        fields += [("nx", "<f4"), ("ny", "<f4"), ("nz", "<f4")]
    vrec = np.zeros(len(v), dtype=fields)
    vrec["x"], vrec["y"], vrec["z"] = v[:, 0], v[:, 1], v[:, 2]
    if has_n:
        nrm = np.asarray(normals, np.float64).reshape(-1, 3)
        vrec["nx"], vrec["ny"], vrec["nz"] = nrm[:, 0], nrm[:, 1], nrm[:, 2]
    f = np.zeros((0, 3), np.int64) if faces is None else np.asarray(faces, np.int64).reshape(-1, 3)
    head = ["ply", "format binary_little_endian 1.0", "comment scanrecon",
            f"element vertex {len(v)}", "property float x", "property float y", "property float z"]
    if has_n:
        head += ["property float nx", "property float ny", "property float nz"]
    head += [f"element face {len(f)}", "property list uchar uint vertex_indices", "end_header"]
    frec = np.zeros(len(f), dtype=[("n", "u1"), ("i", "<u4", 3)])
    frec["n"] = 3
    frec["i"] = f
    with open(path, "wb") as fh:
        fh.write(("\n".join(head) + "\n").encode("ascii"))
        fh.write(vrec.tobytes())
        fh.write(frec.tobytes())


def _parse_ply_header(data):
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise DataError("not a PLY file")
    nl = data.index(b"\n", end)
    lines = data[:nl].decode("ascii", errors="replace").splitlines()
    fmt, elements = None, []
    for ln in lines[1:]:
        p = ln.split()
        if not p or p[0] in ("comment", "obj_info", "end_header"):
            continue
        if p[0] == "format":
            fmt = p[1]
        elif p[0] == "element":
            elements.append([p[1], int(p[2]), []])
        elif p[0] == "property":
            if not elements:
                raise DataError("PLY property before any element")
            if p[1] == "list":
                elements[-1][2].append((p[4], "list", _PLY_TYPES[p[2]], _PLY_TYPES[p[3]]))
            else:
                elements[-1][2].append((p[2], "scalar", _PLY_TYPES[p[1]], None))
    if fmt not in ("ascii", "binary_little_endian", "binary_big_endian"):
        raise DataError(f"unsupported PLY format {fmt!r}")
    return fmt, elements, nl + 1


def read_ply_arrays(path):
    """Returns ``{element: {property: array}}``; list properties become lists of arrays or 2D arrays."""
    data = Path(path).read_bytes()
    try:
        fmt, elements, off = _parse_ply_header(data)
    except (KeyError, ValueError, IndexError) as e:
        raise DataError(f"{path}: bad PLY header ({e})") from None
    out = {}
    if fmt == "ascii":
        tokens = data[off:].split()
        pos = 0
        for name, count, props in elements:
            cols = {p[0]: [] for p in props}
            for _ in range(count):
                for pname, kind, t, it in props:
                    if kind == "scalar":
                        cols[pname].append(float(tokens[pos]))
                        pos += 1
                    else:
                        k = int(tokens[pos])
                        cols[pname].append(np.array([float(x) for x in tokens[pos + 1:pos + 1 + k]]).astype(it))
                        pos += 1 + k
            out[name] = {p[0]: (np.array(cols[p[0]], dtype=p[2]) if p[1] == "scalar" else cols[p[0]])
                         for p in props}
        return out
    end = "<" if fmt == "binary_little_endian" else ">"
    for name, count, props in elements:
        if all(k == "scalar" for _, k, _, _ in props):
            dt = np.dtype([(pn, end + t) for pn, _, t, _ in props])
            rec = np.frombuffer(data, dtype=dt, count=count, offset=off)
            off += dt.itemsize * count
            out[name] = {pn: rec[pn].astype(rec[pn].dtype.newbyteorder("=")) for pn, _, _, _ in props}
            continue
        # general path: fixed-length lists are read in one go when possible
        simple = len(props) == 1 and props[0][1] == "list"
        if simple and count:
            pn, _, ct, it = props[0]
            k = int(np.frombuffer(data, dtype=end + ct, count=1, offset=off)[0])
            dt = np.dtype([("n", end + ct), ("i", end + it, (k,))])
            if off + dt.itemsize * count <= len(data):
                rec = np.frombuffer(data, dtype=dt, count=count, offset=off)
                if np.all(rec["n"] == k):
                    off += dt.itemsize * count
                    out[name] = {pn: rec["i"].astype(np.int64)}
                    continue
        cols = {p[0]: [] for p in props}
        for _ in range(count):
            for pn, kind, t, it in props:
                if kind == "scalar":
                    v = np.frombuffer(data, dtype=end + t, count=1, offset=off)[0]
                    off += np.dtype(t).itemsize
                    cols[pn].append(v)
                else:
                    k = int(np.frombuffer(data, dtype=end + t, count=1, offset=off)[0])
                    off += np.dtype(t).itemsize
                    cols[pn].append(np.frombuffer(data, dtype=end + it, count=k, offset=off).astype(np.int64))
                    off += np.dtype(it).itemsize * k
        out[name] = {p[0]: (np.array(cols[p[0]]) if p[1] == "scalar" else cols[p[0]]) for p in props}
    return out


def read_ply(path):
    """Returns ``(TriangleMesh, normals or None)``; polygons are fan-triangulated."""
    el = read_ply_arrays(path)
    if "vertex" not in el:
        raise DataError(f"{path}: PLY has no vertex element")
    vx = el["vertex"]
    v = np.column_stack([vx["x"], vx["y"], vx["z"]]).astype(np.float64)
    normals = None
    if all(k in vx for k in ("nx", "ny", "nz")):
        normals = np.column_stack([vx["nx"], vx["ny"], vx["nz"]]).astype(np.float64)
    faces = np.zeros((0, 3), np.int64)
    if "face" in el:
        key = "vertex_indices" if "vertex_indices" in el["face"] else next(iter(el["face"]), None)
        polys = el["face"][key] if key else []
        if isinstance(polys, np.ndarray) and polys.ndim == 2 and polys.shape[1] == 3:
            faces = polys.astype(np.int64)
        else:
            tris = [[p[0], p[i], p[i + 1]] for p in polys for i in range(1, len(p) - 1)]
            faces = np.array(tris, dtype=np.int64).reshape(-1, 3)
    try:
        return TriangleMesh(v, faces), normals
    except ValueError as e:
        raise DataError(f"{path}: invalid mesh ({e})") from None


def export_mesh(m: TriangleMesh, path, fmt="stl-binary"):
    if fmt not in FORMATS:
        raise ValueError(f"unknown mesh format {fmt!r}; expected one of {FORMATS}")
    if m.n_faces == 0:
        raise DataError("refusing to write an empty mesh")
    try:
        if fmt == "stl-binary":
            write_stl(path, m)
        else:
            write_ply(path, m.vertices, m.faces)
    except OSError as e:
        raise DataError(f"cannot write {path}: {e}") from None


def read_mesh(path) -> TriangleMesh:
    with open(path, "rb") as f:
        head = f.read(3)
    if head == b"ply":
        return read_ply(path)[0]
    return read_stl(path)

"""Readers and writers for PLY / XYZ point clouds and Wavefront OBJ meshes."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import FormatError
from .geometry import PointCloud, PolyMesh

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def write_ply(path, cloud: PointCloud, binary: bool = True) -> None:
    names = ["x", "y", "z"] + (["nx", "ny", "nz"] if cloud.has_normals else [])
    data = cloud.positions if not cloud.has_normals else np.hstack([cloud.positions, cloud.normals])
    fmt = "binary_little_endian" if binary else "ascii"
    header = ["ply", f"format {fmt} 1.0", f"element vertex {len(cloud)}"]
    header += [f"property double {n}" for n in names]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(np.ascontiguousarray(data, dtype="<f8").tobytes())
        else:
            for row in data:
                fh.write((" ".join(repr(float(v)) for v in row) + "\n").encode("ascii"))


def read_ply(path) -> PointCloud:
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header")
    if not raw.startswith(b"ply") or end < 0:
        raise FormatError(f"{path}: not a PLY file")
    body_start = raw.index(b"\n", end) + 1
    lines = raw[:end].decode("ascii").splitlines()
    fmt = None
    elements: list[tuple[str, int, list[tuple[str, str]]]] = []
    for line in lines[1:]:
        parts = line.split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise FormatError(f"{path}: property before element")
            if parts[1] == "list":
                elements[-1][2].append(("list", parts[-1]))
            else:
                elements[-1][2].append((_PLY_TYPES[parts[1]], parts[2]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise FormatError(f"{path}: unsupported PLY format {fmt!r}")
    if not elements or elements[0][0] != "vertex":
        raise FormatError(f"{path}: first element must be 'vertex'")
    _, count, props = elements[0]
    if any(t == "list" for t, _ in props):
        raise FormatError(f"{path}: list properties on vertices are not supported")
    names = [n for _, n in props]
    if fmt == "ascii":
        text = raw[body_start:].decode("ascii").split("\n")
        rows = [ln.split() for ln in text if ln.strip()][:count]
        table = np.asarray(rows, dtype=np.float64).reshape(count, len(props))
        cols = {n: table[:, i] for i, n in enumerate(names)}
    else:
        dtype = np.dtype([(n, "<" + t) for t, n in props])
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=body_start)
        cols = {n: arr[n].astype(np.float64) for n in names}
    try:
        pos = np.stack([cols["x"], cols["y"], cols["z"]], axis=1)
    except KeyError as exc:
        raise FormatError(f"{path}: missing coordinate property {exc}") from None
    normals = None
    if all(k in cols for k in ("nx", "ny", "nz")):
        normals = np.stack([cols["nx"], cols["ny"], cols["nz"]], axis=1)
    return PointCloud(pos, normals)


def write_xyz(path, cloud: PointCloud) -> None:
    np.savetxt(path, cloud.positions, fmt="%.17g")


def read_xyz(path) -> PointCloud:
    data = np.loadtxt(path, dtype=np.float64, ndmin=2)
    if data.shape[1] < 3:
        raise FormatError(f"{path}: expected at least 3 columns")
    normals = data[:, 3:6] if data.shape[1] >= 6 else None
    return PointCloud(data[:, :3], normals)


def read_cloud(path) -> PointCloud:
    suffix = Path(path).suffix.lower()
    if suffix == ".ply":
        return read_ply(path)
    if suffix in (".xyz", ".txt", ".pts"):
        return read_xyz(path)
    raise FormatError(f"{path}: unknown point-cloud extension")


def read_obj(path) -> PolyMesh:
    verts: list[list[float]] = []
    faces: list[list[int]] = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                face = []
                for tok in parts[1:]:
                    i = int(tok.split("/")[0])
                    # negative indices count back from the latest vertex
                    face.append(i - 1 if i > 0 else len(verts) + i)
                faces.append(face)
    return PolyMesh(np.asarray(verts, dtype=np.float64).reshape(-1, 3), faces)


def write_obj(path, mesh: PolyMesh) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for v in mesh.vertices:
            fh.write("v {} {} {}\n".format(*(repr(float(c)) for c in v)))
        for f in mesh.faces:
            fh.write("f " + " ".join(str(i + 1) for i in f) + "\n")

"""Triangle mesh container, OFF/OBJ I/O and the geometry kernels used by the
losses and metrics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import sparse


class MeshError(ValueError):
    pass


class MeshParseError(MeshError):
    def __init__(self, message: str, line: int):
        super().__init__(f"{message} at line {line}")
        self.line = line


@dataclass(frozen=True, eq=False)
class Mesh:
    """Vertices (n x 3 float64) and triangular faces (m x 3, 0-based)."""

    vertices: np.ndarray
    faces: np.ndarray
    name: str = ""

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64)
        f = np.array(self.faces, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshError(f"vertices must be n x 3, got {v.shape}")
        if f.ndim != 2 or f.shape[1] != 3:
            raise MeshError(f"faces must be m x 3, got {f.shape}")
        v.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def n(self) -> int:
        return self.vertices.shape[0]

    @property
    def m(self) -> int:
        return self.faces.shape[0]

    def with_vertices(self, vertices: np.ndarray, name: Optional[str] = None) -> "Mesh":
        return Mesh(vertices, self.faces, self.name if name is None else name)


@dataclass(frozen=True, eq=False)
class VertexScalarField:
    values: np.ndarray
    mesh_id: str = ""

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float64).reshape(-1)
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def __len__(self):
        return self.values.shape[0]


@dataclass(frozen=True, eq=False)
class ConnectivityMatrices:
    adjacency: sparse.csr_matrix
    degree: np.ndarray
    nonweighted_laplacian: sparse.csr_matrix


@dataclass
class ValidationReport:
    index_errors: list = field(default_factory=list)
    degenerate_faces: list = field(default_factory=list)
    isolated_vertices: list = field(default_factory=list)
    nonmanifold_edges: list = field(default_factory=list)
    size_errors: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not (self.index_errors or self.degenerate_faces or self.isolated_vertices
                    or self.nonmanifold_edges or self.size_errors)

    def findings(self) -> list[str]:
        out = [f"face {i}: vertex index out of range" for i in self.index_errors]
        out += [f"face {i}: degenerate" for i in self.degenerate_faces]
        out += [f"vertex {i}: isolated" for i in self.isolated_vertices]
        out += [f"edge {tuple(e)}: non-manifold" for e in self.nonmanifold_edges]
        out += list(self.size_errors)
        return out


# ---------------------------------------------------------------------------
# I/O

def _fmt(x: float) -> str:
    return "%.17g" % x


def _content_lines(text: str):
    for lineno, raw in enumerate(text.splitlines(), start=1):
        yield lineno, raw.strip()


def _check_faces(faces, n, face_lines):
    for f, lineno in zip(faces, face_lines):
        for idx in f:
            if idx < 0 or idx >= n:
                raise MeshParseError(f"face index {idx} out of range [0, {n})", lineno)
        if len(set(f)) != 3:
            raise MeshParseError("face repeats a vertex index", lineno)


def _parse_off(text: str) -> tuple[Mesh, Optional[np.ndarray]]:
    lines = _content_lines(text)
    header_seen = False
    counts = None
    verts, faces, face_lines, scalars = [], [], [], []
    for lineno, line in lines:
        if line.startswith("# vscalar"):
            try:
                scalars.append(float(line.split()[2]))
            except (IndexError, ValueError):
                raise MeshParseError("malformed vscalar line", lineno) from None
            continue
        if not line or line.startswith("#"):
            continue
        if not header_seen:
            if not line.startswith("OFF"):
                raise MeshParseError("missing OFF header", lineno)
            header_seen = True
            rest = line[3:].split()
            if rest:
                line = " ".join(rest)
            else:
                continue
        tokens = line.split()
        if counts is None:
            try:
                nv, nf = int(tokens[0]), int(tokens[1])
            except (IndexError, ValueError):
                raise MeshParseError("malformed OFF counts line", lineno) from None
            counts = (nv, nf)
            continue
        if len(verts) < counts[0]:
            try:
                verts.append([float(t) for t in tokens[:3]])
            except ValueError:
                raise MeshParseError("malformed vertex", lineno) from None
            if len(tokens) < 3:
                raise MeshParseError("malformed vertex", lineno)
            continue
        if len(faces) < counts[1]:
            try:
                k = int(tokens[0])
                idx = [int(t) for t in tokens[1:1 + k]]
            except (IndexError, ValueError):
                raise MeshParseError("malformed face", lineno) from None
            if k != 3 or len(idx) != 3:
                raise MeshParseError("non-triangular face", lineno)
            faces.append(idx)
            face_lines.append(lineno)
            continue
        raise MeshParseError("unexpected trailing data", lineno)
    if not header_seen:
        raise MeshParseError("missing OFF header", 1)
    if counts is None or len(verts) != counts[0] or len(faces) != counts[1]:
        raise MeshParseError("truncated OFF body", len(text.splitlines()))
    _check_faces(faces, len(verts), face_lines)
    return Mesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)), (
        np.array(scalars) if scalars else None)


def _parse_obj(text: str) -> tuple[Mesh, Optional[np.ndarray]]:
    verts, faces, face_lines, scalars = [], [], [], []
    for lineno, line in _content_lines(text):
        if not line or line.startswith("#"):
            continue
        tokens = line.split()
        if tokens[0] == "v":
            try:
                vals = [float(t) for t in tokens[1:]]
            except ValueError:
                raise MeshParseError("malformed vertex", lineno) from None
            if len(vals) not in (3, 6):
                raise MeshParseError("malformed vertex", lineno)
            verts.append(vals[:3])
            if len(vals) == 6:
                scalars.append(vals[3])
        elif tokens[0] == "f":
            if len(tokens) != 4:
                raise MeshParseError("non-triangular face", lineno)
            try:
                # "f 1/1/1 ..." forms keep only the position index
                idx = [int(t.split("/")[0]) - 1 for t in tokens[1:]]
            except ValueError:
                raise MeshParseError("malformed face", lineno) from None
            faces.append(idx)
            face_lines.append(lineno)
    _check_faces(faces, len(verts), face_lines)
    if scalars and len(scalars) != len(verts):
        raise MeshParseError("vertex colors present on some vertices only", 1)
    return Mesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)), (
        np.array(scalars) if scalars else None)


def _detect_format(fmt: str) -> str:
    fmt = fmt.lower().lstrip(".")
    if fmt not in ("off", "obj"):
        raise MeshError(f"unsupported mesh format {fmt!r}")
    return fmt


def parse_mesh_with_scalar(data, fmt: str) -> tuple[Mesh, Optional[VertexScalarField]]:
    text = data.decode("utf-8") if isinstance(data, (bytes, bytearray)) else data
    mesh, scalar = (_parse_off if _detect_format(fmt) == "off" else _parse_obj)(text)
    if scalar is not None and scalar.shape[0] != mesh.n:
        raise MeshError(f"scalar sidecar has {scalar.shape[0]} values for {mesh.n} vertices")
    return mesh, (VertexScalarField(scalar) if scalar is not None else None)


def parse_mesh(data, fmt: str) -> Mesh:
    """Parse OFF or OBJ text. Only triangles are accepted; vertex order is kept."""
    return parse_mesh_with_scalar(data, fmt)[0]


def write_mesh(mesh: Mesh, fmt: str, scalar: Optional[VertexScalarField] = None) -> bytes:
    fmt = _detect_format(fmt)
    if scalar is not None and len(scalar) != mesh.n:
        raise MeshError(f"scalar field has {len(scalar)} values, mesh has {mesh.n} vertices")
    out = []
    if fmt == "off":
        out.append("OFF")
        out.append(f"{mesh.n} {mesh.m} 0")
        for x, y, z in mesh.vertices:
            out.append(f"{_fmt(x)} {_fmt(y)} {_fmt(z)}")
        for a, b, c in mesh.faces:
            out.append(f"3 {a} {b} {c}")
        if scalar is not None:
            out.extend(f"# vscalar {_fmt(s)}" for s in scalar.values)
    else:
        for i, (x, y, z) in enumerate(mesh.vertices):
            line = f"v {_fmt(x)} {_fmt(y)} {_fmt(z)}"
            if scalar is not None:
                s = _fmt(scalar.values[i])
                line += f" {s} {s} {s}"
            out.append(line)
        for a, b, c in mesh.faces:
            out.append(f"f {a + 1} {b + 1} {c + 1}")
    return ("\n".join(out) + "\n").encode("ascii")


def read_mesh(path, fmt: Optional[str] = None) -> Mesh:
    path = str(path)
    with open(path, "rb") as fh:
        return parse_mesh(fh.read(), fmt or path.rsplit(".", 1)[-1])


def save_mesh(path, mesh: Mesh, scalar: Optional[VertexScalarField] = None) -> None:
    path = str(path)
    with open(path, "wb") as fh:
        fh.write(write_mesh(mesh, path.rsplit(".", 1)[-1], scalar))


# ---------------------------------------------------------------------------
# geometry

def face_cross(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Unnormalized face normals (twice the face area in magnitude)."""
    v0, v1, v2 = (vertices[faces[:, i]] for i in range(3))
    return np.cross(v1 - v0, v2 - v0)


def face_areas(mesh: Mesh) -> np.ndarray:
    return 0.5 * np.linalg.norm(face_cross(mesh.vertices, mesh.faces), axis=1)


def face_normals(mesh: Mesh) -> np.ndarray:
    c = face_cross(mesh.vertices, mesh.faces)
    norms = np.linalg.norm(c, axis=1)
    bad = np.flatnonzero(norms == 0)
    if bad.size:
        raise MeshError(f"zero-area face {int(bad[0])} has no normal")
    return c / norms[:, None]


def edges(mesh_or_faces) -> np.ndarray:
    """Unique undirected edges as sorted (min, max) pairs in lexicographic order."""
    faces = mesh_or_faces.faces if isinstance(mesh_or_faces, Mesh) else np.asarray(mesh_or_faces)
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e = np.sort(e, axis=1)
    return np.unique(e, axis=0)


def edge_lengths(mesh: Mesh) -> np.ndarray:
    e = edges(mesh)
    return np.linalg.norm(mesh.vertices[e[:, 1]] - mesh.vertices[e[:, 0]], axis=1)


def vertex_areas(mesh: Mesh) -> np.ndarray:
    """Sum of the areas of all faces incident to each vertex (0 for isolated vertices)."""
    fa = face_areas(mesh)
    return np.bincount(mesh.faces.reshape(-1), weights=np.repeat(fa, 3), minlength=mesh.n)


def adjacency(mesh: Mesh) -> sparse.csr_matrix:
    e = edges(mesh)
    n = mesh.n
    rows = np.concatenate([e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 1], e[:, 0]])
    return sparse.csr_matrix((np.ones(rows.shape[0]), (rows, cols)), shape=(n, n))


def connectivity(mesh: Mesh) -> ConnectivityMatrices:
    J = adjacency(mesh)
    deg = np.asarray(J.sum(axis=1)).reshape(-1)
    if np.any(deg == 0):
        raise MeshError(f"vertex {int(np.flatnonzero(deg == 0)[0])} has degree 0")
    L = sparse.identity(mesh.n, format="csr") - sparse.diags(1.0 / deg) @ J
    return ConnectivityMatrices(J, deg, L.tocsr())


def mean_curvature(mesh: Mesh, signed: bool = False) -> VertexScalarField:
    """Per-vertex discrete mean curvature |W V|_i / (2 A_i), A_i the lumped mass.

    With ``signed=True`` the sign follows the area-weighted vertex normal, so a
    consistently outward-oriented sphere has positive curvature.
    """
    from .spectral import cotangent_laplacian

    lap = cotangent_laplacian(mesh)
    hn = lap.stiffness @ mesh.vertices
    H = np.linalg.norm(hn, axis=1) / (2.0 * lap.mass)
    if signed:
        c = face_cross(mesh.vertices, mesh.faces)
        vn = np.zeros_like(mesh.vertices)
        for i in range(3):
            np.add.at(vn, mesh.faces[:, i], c)
        H = H * np.where(np.einsum("ij,ij->i", hn, vn) < 0, -1.0, 1.0)
    return VertexScalarField(H, mesh.name)


def validate(mesh: Mesh, degenerate_rel: float = 1e-12) -> ValidationReport:
    rep = ValidationReport()
    n, f = mesh.n, mesh.faces
    if n < 4:
        rep.size_errors.append(f"mesh has {n} vertices, need at least 4")
    if mesh.m < 1:
        rep.size_errors.append("mesh has no faces")
        rep.isolated_vertices.extend(range(n))
        return rep
    in_range = np.all((f >= 0) & (f < n), axis=1)
    rep.index_errors.extend(int(i) for i in np.flatnonzero(~in_range))
    good = f[in_range]
    good_idx = np.flatnonzero(in_range)
    repeated = (good[:, 0] == good[:, 1]) | (good[:, 1] == good[:, 2]) | (good[:, 0] == good[:, 2])
    areas = 0.5 * np.linalg.norm(face_cross(mesh.vertices, good), axis=1)
    mean_area = areas.mean() if areas.size else 0.0
    tiny = areas < degenerate_rel * mean_area if mean_area > 0 else np.ones_like(repeated)
    rep.degenerate_faces.extend(int(i) for i in good_idx[repeated | tiny])
    used = np.zeros(n, dtype=bool)
    used[good.reshape(-1)] = True
    rep.isolated_vertices.extend(int(i) for i in np.flatnonzero(~used))
    e = np.sort(np.concatenate([good[:, [0, 1]], good[:, [1, 2]], good[:, [2, 0]]]), axis=1)
    e = e[e[:, 0] != e[:, 1]]
    uniq, counts = np.unique(e, axis=0, return_counts=True)
    rep.nonmanifold_edges.extend(tuple(int(x) for x in u) for u in uniq[counts > 2])
    return rep

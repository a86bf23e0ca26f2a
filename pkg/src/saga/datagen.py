"""Synthetic multi-class deformable-sphere datasets and dataset manifests.

Every class is a fixed smooth radial displacement of a subdivided icosahedron
(real spherical harmonics of low degree); instances add a small random
low-frequency displacement on top.  All meshes share one connectivity.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from scipy.special import sph_harm_y

from .mesh import Mesh, face_cross, parse_mesh, read_mesh, validate, write_mesh
from .serialize import dumps17, fnv1a64

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


class DatasetError(ValueError):
    pass


def icosahedron() -> Mesh:
    t = (1.0 + 5 ** 0.5) / 2.0
    v = np.array([[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
                  [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
                  [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]], dtype=np.float64)
    f = np.array([[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
                  [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
                  [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
                  [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]])
    return Mesh(v / np.linalg.norm(v, axis=1, keepdims=True), f, "icosahedron")


def icosphere(subdivisions: int = 3, radius: float = 1.0) -> Mesh:
    """Loop-free midpoint subdivision of the icosahedron projected to a sphere.

    Level s has 10 * 4**s + 2 vertices; faces are wound outward.
    """
    base = icosahedron()
    verts = [tuple(v) for v in base.vertices]
    faces = base.faces.tolist()
    for _ in range(subdivisions):
        cache: dict = {}
        new_faces = []

        def mid(a, b):
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                p = (np.asarray(verts[a]) + np.asarray(verts[b])) / 2.0
                verts.append(tuple(p / np.linalg.norm(p)))
                cache[key] = len(verts) - 1
            return cache[key]

        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = new_faces
    return Mesh(np.array(verts) * radius, np.array(faces), f"icosphere{subdivisions}")


def real_sph_harm(l: int, m: int, theta: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Real spherical harmonic; theta is the polar angle, phi the azimuth."""
    if m == 0:
        return sph_harm_y(l, 0, theta, phi).real
    y = sph_harm_y(l, abs(m), theta, phi)
    return np.sqrt(2.0) * (-1) ** m * (y.real if m > 0 else y.imag)


def sh_terms(lmin: int, lmax: int) -> list[tuple[int, int]]:
    return [(l, m) for l in range(lmin, lmax + 1) for m in range(-l, l + 1)]


@dataclass
class ShapeFamilySpec:
    """Icosphere level, per-class displacement coefficients over
    ``sh_terms(2, class_lmax)`` and the per-instance jitter amplitude over
    ``sh_terms(1, jitter_lmax)`` (amplitude decays as 1/l).

    ``expressions`` optionally holds a bank of coefficient vectors over the
    jitter terms shared by every class; instance i wears expression
    ``i % len(expressions)`` on top of its class shape, the way every
    identity of a face dataset performs the same expressions.
    """

    subdivisions: int = 3
    class_coeffs: list = field(default_factory=list)
    class_lmax: int = 3
    jitter: float = 0.04
    jitter_lmax: int = 5
    expressions: list = field(default_factory=list)

    @property
    def n_classes(self) -> int:
        return len(self.class_coeffs)


def default_family(n_classes: int = 3, seed: int = 0, amplitude: float = 0.2,
                   subdivisions: int = 3, jitter: float = 0.04, n_expressions: int = 0,
                   expression_scale: float = 0.0) -> ShapeFamilySpec:
    rng = np.random.default_rng([seed, 7919])
    n_terms = len(sh_terms(2, 3))
    coeffs = [list(rng.normal(0.0, amplitude, n_terms)) for _ in range(n_classes)]
    jterms = sh_terms(1, 5)
    decay = np.array([1.0 / l for l, _ in jterms])
    erng = np.random.default_rng([seed, 6007])
    expressions = [list(erng.normal(0.0, expression_scale, len(jterms)) * decay) for _ in range(n_expressions)]
    return ShapeFamilySpec(subdivisions, coeffs, 3, jitter, 5, expressions)


def _radial_mesh(base: Mesh, terms, coeffs) -> Mesh:
    u = base.vertices / np.linalg.norm(base.vertices, axis=1, keepdims=True)
    theta = np.arccos(np.clip(u[:, 2], -1.0, 1.0))
    phi = np.arctan2(u[:, 1], u[:, 0])
    r = np.ones(base.n)
    for (l, m), c in zip(terms, coeffs):
        r += c * real_sph_harm(l, m, theta, phi)
    if np.any(r <= 0.05):
        raise DatasetError("radial displacement collapses the surface")
    return Mesh(u * r[:, None], base.faces)


def instance_mesh(spec: ShapeFamilySpec, class_id: int, index: int, seed: int,
                  jitter: Optional[float] = None) -> Mesh:
    base = icosphere(spec.subdivisions)
    jitter = spec.jitter if jitter is None else jitter
    cterms = sh_terms(2, spec.class_lmax)
    jterms = sh_terms(1, spec.jitter_lmax)
    rng = np.random.default_rng([seed, class_id, index])
    jit = rng.normal(0.0, 1.0, len(jterms)) * np.array([jitter / l for l, _ in jterms])
    if spec.expressions:
        jit = jit + np.asarray(spec.expressions[index % len(spec.expressions)])
    coeffs = dict(zip(cterms, spec.class_coeffs[class_id]))
    for t, c in zip(jterms, jit):
        coeffs[t] = coeffs.get(t, 0.0) + c
    mesh = _radial_mesh(base, list(coeffs), list(coeffs.values()))
    return Mesh(mesh.vertices, mesh.faces, f"class{class_id}_{index:03d}")


def normals_consistent(mesh: Mesh) -> bool:
    """Every face normal points away from the origin (star-shaped surface)."""
    c = face_cross(mesh.vertices, mesh.faces)
    centroid = mesh.vertices[mesh.faces].mean(axis=1)
    return bool(np.all(np.einsum("ij,ij->i", c, centroid) > 0))


# ---------------------------------------------------------------------------
# manifest

@dataclass
class Instance:
    mesh_path: str
    class_id: int
    split: str
    hash: str


@dataclass
class DatasetManifest:
    classes: list
    instances: list
    normalization: dict
    shared_connectivity: dict
    seed: int
    root: str = "."
    extra: dict = field(default_factory=dict)

    def to_json(self) -> bytes:
        doc = {
            "classes": self.classes,
            "instances": [asdict(i) for i in self.instances],
            "normalization": self.normalization,
            "shared_connectivity": self.shared_connectivity,
            "seed": self.seed,
            "extra": self.extra,
        }
        return dumps17(doc).encode("utf-8")

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_json())

    def split(self, name: str) -> list:
        return [i for i in self.instances if i.split == name]

    def normalize(self, vertices: np.ndarray) -> np.ndarray:
        c = np.asarray(self.normalization["center"], dtype=np.float64)
        return (vertices - c) / float(self.normalization["scale"])


def split_counts(per_class: int, splits: Sequence[float]) -> tuple[int, int, int]:
    """Floor the validation and test counts; the remainder goes to training."""
    if len(splits) != 3 or any(s < 0 for s in splits) or abs(sum(splits) - 1.0) > 1e-9:
        raise DatasetError(f"splits must be three non-negative fractions summing to 1, got {splits}")
    n_val = int(np.floor(per_class * splits[1] + 1e-9))
    n_test = int(np.floor(per_class * splits[2] + 1e-9))
    return per_class - n_val - n_test, n_val, n_test


def _normalization(train_vertices: list) -> dict:
    allv = np.concatenate(train_vertices)
    center = allv.mean(axis=0)
    c = allv - center
    scale = float(np.linalg.norm(c.max(axis=0) - c.min(axis=0)))
    return {"center": center.tolist(), "scale": scale}


def nearest_centroid_accuracy(manifest: DatasetManifest) -> float:
    train, ytr = load_split(manifest, "train")
    test, yte = load_split(manifest, "test")
    X = np.stack([m.vertices.reshape(-1) for m in train])
    cents = np.stack([X[ytr == c].mean(axis=0) for c in range(len(manifest.classes))])
    T = np.stack([m.vertices.reshape(-1) for m in test])
    pred = np.argmin(((T[:, None, :] - cents[None]) ** 2).sum(axis=2), axis=1)
    return float(np.mean(pred == yte))


def generate_dataset(spec: ShapeFamilySpec, per_class: int, splits: Sequence[float] = (0.85, 0.10, 0.05),
                     seed: int = 0, out_dir="dataset", retries: int = 3) -> DatasetManifest:
    if per_class < 10:
        raise DatasetError("need at least 10 instances per class")
    if spec.n_classes < 2:
        raise DatasetError("need at least two classes")
    n_train, n_val, n_test = split_counts(per_class, splits)
    if min(n_train, n_val, n_test) < 1:
        raise DatasetError(f"every class must appear in every split, got {n_train}/{n_val}/{n_test}")
    out = Path(out_dir)
    (out / "meshes").mkdir(parents=True, exist_ok=True)

    jitter = spec.jitter
    for attempt in range(retries + 1):
        try:
            meshes = [[instance_mesh(spec, c, i, seed, jitter) for i in range(per_class)]
                      for c in range(spec.n_classes)]
            bad = [m.name for row in meshes for m in row
                   if not validate(m).ok or not normals_consistent(m)]
            if bad:
                raise DatasetError(f"{len(bad)} meshes failed validation, first {bad[0]}")
            break
        except DatasetError as exc:
            if attempt == retries:
                raise DatasetError(f"dataset generation failed after {retries} retries: {exc}") from exc
            jitter *= 0.5
            log.warning("regenerating with jitter %.4g: %s", jitter, exc)

    instances, train_vertices = [], []
    for c, row in enumerate(meshes):
        # one split order for all classes, so a shared expression bank lands
        # in the same splits for every class
        order = np.random.default_rng([seed, 104729]).permutation(per_class)
        split_of = {}
        for rank, i in enumerate(order):
            split_of[int(i)] = "val" if rank < n_val else "test" if rank < n_val + n_test else "train"
        for i, mesh in enumerate(row):
            rel = f"meshes/{mesh.name}.off"
            data = write_mesh(mesh, "off")
            (out / rel).write_bytes(data)
            instances.append(Instance(rel, c, split_of[i], fnv1a64(data)))
            if split_of[i] == "train":
                train_vertices.append(mesh.vertices)

    faces = meshes[0][0].faces
    manifest = DatasetManifest(
        classes=[f"class{c}" for c in range(spec.n_classes)],
        instances=instances,
        normalization=_normalization(train_vertices),
        shared_connectivity={"reference": instances[0].mesh_path, "n": int(meshes[0][0].n),
                             "m": int(faces.shape[0]), "faces_hash": fnv1a64(faces.astype("<i8").tobytes())},
        seed=seed,
        root=str(out),
        extra={"family": asdict(spec) | {"jitter": jitter}, "per_class": per_class, "splits": list(splits)},
    )
    acc = nearest_centroid_accuracy(manifest)
    manifest.extra["nearest_centroid_test_accuracy"] = acc
    if acc < 0.9:
        raise DatasetError(f"classes are not separable enough: nearest-centroid accuracy {acc:.3f}")
    manifest.save(out / "manifest.json")
    return manifest


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_bytes())
    except FileNotFoundError:
        raise DatasetError(f"manifest {path} not found") from None
    except json.JSONDecodeError as exc:
        raise DatasetError(f"manifest {path} is not valid JSON: {exc}") from exc
    for key in ("classes", "instances", "normalization", "shared_connectivity", "seed"):
        if key not in doc:
            raise DatasetError(f"manifest {path}: missing field {key!r}")
    try:
        instances = [Instance(str(i["mesh_path"]), int(i["class_id"]), str(i["split"]), str(i["hash"]))
                     for i in doc["instances"]]
    except (KeyError, TypeError) as exc:
        raise DatasetError(f"manifest {path}: malformed instance record ({exc})") from exc
    for inst in instances:
        if inst.split not in SPLITS:
            raise DatasetError(f"manifest {path}: unknown split {inst.split!r}")
        if not 0 <= inst.class_id < len(doc["classes"]):
            raise DatasetError(f"manifest {path}: class id {inst.class_id} out of range")
    norm = doc["normalization"]
    if "center" not in norm or "scale" not in norm or len(norm["center"]) != 3 or norm["scale"] <= 0:
        raise DatasetError(f"manifest {path}: malformed normalization")
    return DatasetManifest(doc["classes"], instances, norm, doc["shared_connectivity"],
                           int(doc["seed"]), str(path.parent), doc.get("extra", {}))


def _load_instance(manifest: DatasetManifest, inst: Instance, faces_ref: Optional[np.ndarray]) -> Mesh:
    p = Path(manifest.root) / inst.mesh_path
    try:
        data = p.read_bytes()
    except FileNotFoundError:
        raise DatasetError(f"mesh file {p} not found") from None
    if fnv1a64(data) != inst.hash:
        raise DatasetError(f"hash mismatch for {p}")
    mesh = parse_mesh(data, "off")
    if faces_ref is not None and not np.array_equal(mesh.faces, faces_ref):
        raise DatasetError(f"{p} does not share the dataset connectivity")
    return Mesh(manifest.normalize(mesh.vertices), mesh.faces, Path(inst.mesh_path).stem)


def iterate(manifest: DatasetManifest, split: Optional[str] = None) -> Iterator[tuple[Mesh, int]]:
    """Yield (normalized mesh, class id) for a split (all instances if None)."""
    faces = None
    for inst in manifest.instances:
        if split is not None and inst.split != split:
            continue
        mesh = _load_instance(manifest, inst, faces)
        faces = mesh.faces if faces is None else faces
        yield mesh, inst.class_id


def load_split(manifest: DatasetManifest, split: Optional[str] = None) -> tuple[list, np.ndarray]:
    pairs = list(iterate(manifest, split))
    return [m for m, _ in pairs], np.array([c for _, c in pairs], dtype=np.int64)


def import_directory(directory, class_map: dict, splits: Sequence[float] = (0.85, 0.10, 0.05),
                     seed: int = 0) -> DatasetManifest:
    """Build a manifest over a directory of same-connectivity OFF files.

    ``class_map`` maps file names (relative to ``directory``) to class names.
    The manifest is written to ``directory/manifest.json``.
    """
    directory = Path(directory)
    classes = sorted(set(class_map.values()))
    by_class: dict = {c: [] for c in classes}
    for fname in sorted(class_map):
        by_class[class_map[fname]].append(fname)
    instances, train_vertices, faces = [], [], None
    for cid, cname in enumerate(classes):
        files = by_class[cname]
        n_train, n_val, n_test = split_counts(len(files), splits)
        order = np.random.default_rng([seed, cid, 104729]).permutation(len(files))
        for rank, i in enumerate(order):
            fname = files[int(i)]
            data = (directory / fname).read_bytes()
            mesh = read_mesh(directory / fname)
            if faces is None:
                faces = mesh.faces
            elif not np.array_equal(faces, mesh.faces):
                raise DatasetError(f"{fname} does not share the connectivity of the first mesh")
            split = "val" if rank < n_val else "test" if rank < n_val + n_test else "train"
            instances.append(Instance(fname, cid, split, fnv1a64(data)))
            if split == "train":
                train_vertices.append(mesh.vertices)
    if not train_vertices:
        raise DatasetError("no training instances")
    instances.sort(key=lambda i: (i.class_id, i.mesh_path))
    manifest = DatasetManifest(
        classes, instances, _normalization(train_vertices),
        {"reference": instances[0].mesh_path, "n": int(len(train_vertices[0])), "m": int(faces.shape[0]),
         "faces_hash": fnv1a64(faces.astype("<i8").tobytes())},
        seed, str(directory), {"imported": True, "splits": list(splits)})
    manifest.save(directory / "manifest.json")
    return manifest


def mesh_paths(manifest: DatasetManifest) -> list:
    return [os.path.join(manifest.root, i.mesh_path) for i in manifest.instances]

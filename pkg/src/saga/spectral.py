"""Cotangent Laplace-Beltrami operator, its eigenbasis, least-squares
projection onto a basis and the shared-basis fit."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg
from scipy import sparse

from .mesh import Mesh, MeshError, face_cross, validate, vertex_areas
from .serialize import dumps17

COT_CLAMP = 1e4
DENSE_LIMIT = 4096


class SpectralError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class LaplacianPair:
    """Stiffness W (positive semidefinite, zero row sums) and lumped mass M."""

    stiffness: sparse.csr_matrix
    mass: np.ndarray


@dataclass(frozen=True, eq=False)
class SpectralBasis:
    vectors: np.ndarray
    eigenvalues: np.ndarray
    mass: np.ndarray
    is_shared: bool = False
    mixing_weights: Optional[np.ndarray] = None
    source_mesh_ids: tuple = ()
    loss_trace: tuple = ()

    def __post_init__(self):
        for name in ("vectors", "eigenvalues", "mass", "mixing_weights"):
            val = getattr(self, name)
            if val is not None:
                val = np.array(val, dtype=np.float64)
                val.setflags(write=False)
                object.__setattr__(self, name, val)

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @property
    def k(self) -> int:
        return self.vectors.shape[1]

    @property
    def basis_id(self) -> str:
        cached = self.__dict__.get("_id")
        if cached is None:
            cached = hashlib.sha256(np.ascontiguousarray(self.vectors).tobytes()).hexdigest()[:16]
            object.__setattr__(self, "_id", cached)
        return cached

    def truncate(self, k: int) -> "SpectralBasis":
        return SpectralBasis(self.vectors[:, :k], self.eigenvalues[:k], self.mass, self.is_shared,
                             self.mixing_weights, self.source_mesh_ids, self.loss_trace)


@dataclass(frozen=True, eq=False)
class SpectralCoeffs:
    coeffs: np.ndarray
    basis_id: str = ""

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=np.float64)
        if c.ndim != 2 or c.shape[1] != 3:
            raise SpectralError(f"coefficients must be k x 3, got {c.shape}")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    @property
    def k(self) -> int:
        return self.coeffs.shape[0]


def cotangent_cots(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Cotangent of the angle at each face corner, clamped to +-COT_CLAMP."""
    cots = np.empty(faces.shape, dtype=np.float64)
    for c in range(3):
        i, j, k = faces[:, c], faces[:, (c + 1) % 3], faces[:, (c + 2) % 3]
        a = vertices[j] - vertices[i]
        b = vertices[k] - vertices[i]
        dot = np.einsum("ij,ij->i", a, b)
        cr = np.linalg.norm(np.cross(a, b), axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            cot = dot / cr
        cot = np.where(cr > 0, cot, np.sign(dot) * COT_CLAMP)
        cots[:, c] = np.clip(cot, -COT_CLAMP, COT_CLAMP)
    return cots


def cotangent_laplacian(mesh: Mesh) -> LaplacianPair:
    """W_ij = -1/2 (cot a_ij + cot b_ij), W_ii = -sum_j W_ij; barycentric lumped mass."""
    rep = validate(mesh)
    if rep.index_errors or rep.nonmanifold_edges:
        raise MeshError("cotangent Laplacian needs a manifold mesh: " + "; ".join(rep.findings()[:3]))
    if rep.isolated_vertices:
        raise MeshError(f"vertex {rep.isolated_vertices[0]} is isolated")
    n, f = mesh.n, mesh.faces
    cots = cotangent_cots(mesh.vertices, f)
    rows, cols, vals = [], [], []
    for c in range(3):
        j, k = f[:, (c + 1) % 3], f[:, (c + 2) % 3]
        w = -0.5 * cots[:, c]
        rows += [j, k]
        cols += [k, j]
        vals += [w, w]
    rows, cols, vals = np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)
    off = sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))
    diag = -np.asarray(off.sum(axis=1)).reshape(-1)
    W = (off + sparse.diags(diag)).tocsr()
    mass = vertex_areas(mesh) / 3.0
    return LaplacianPair(W, mass)


def _fix_signs(vectors: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[idx, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def eigendecompose(lap: LaplacianPair, k: int, dense_limit: int = DENSE_LIMIT) -> SpectralBasis:
    """Solve W phi = lambda M phi for the k smallest eigenpairs.

    Columns are M-orthonormal, eigenvalues ascending, and each column is
    flipped so its largest-magnitude entry is positive.
    """
    n = lap.mass.shape[0]
    if not 1 <= k <= n:
        raise SpectralError(f"k={k} must lie in [1, {n}]")
    W = lap.stiffness
    if not np.all(np.isfinite(W.data)):
        raise SpectralError("stiffness matrix has non-finite entries")
    if np.any(lap.mass <= 0):
        raise SpectralError("mass entries must be positive")
    inv_sqrt = 1.0 / np.sqrt(lap.mass)
    if n <= dense_limit or k > n - 2:
        S = inv_sqrt[:, None] * W.toarray() * inv_sqrt[None, :]
        S = 0.5 * (S + S.T)
        lam, U = scipy.linalg.eigh(S, subset_by_index=[0, k - 1], driver="evr")
        phi = inv_sqrt[:, None] * U
    else:
        from scipy.sparse.linalg import eigsh

        lam, phi = eigsh(W, k=k, M=sparse.diags(lap.mass), sigma=-1e-8, which="LM")
        order = np.argsort(lam, kind="stable")
        lam, phi = lam[order], phi[:, order]
    phi = _fix_signs(phi)
    return SpectralBasis(phi, lam, lap.mass)


def mesh_basis(mesh: Mesh, k: Optional[int] = None) -> SpectralBasis:
    b = eigendecompose(cotangent_laplacian(mesh), mesh.n if k is None else k)
    return SpectralBasis(b.vectors, b.eigenvalues, b.mass, source_mesh_ids=(mesh.name,))


class Projector:
    """Least-squares solver for V ~ Phi A, reusing one QR factorization."""

    def __init__(self, basis: SpectralBasis):
        self.basis = basis
        Q, R = scipy.linalg.qr(basis.vectors, mode="economic")
        d = np.abs(np.diag(R))
        tol = max(basis.vectors.shape) * np.finfo(float).eps * (d.max() if d.size else 0.0)
        if d.size == 0 or np.any(d <= tol):
            raise SpectralError("basis is rank deficient; least-squares projection is ill-posed")
        self.Q, self.R = Q, R

    def solve(self, vertices: np.ndarray) -> np.ndarray:
        V = np.asarray(vertices, dtype=np.float64)
        if V.shape[0] != self.basis.n:
            raise SpectralError(f"basis has {self.basis.n} rows, vertices have {V.shape[0]}")
        return scipy.linalg.solve_triangular(self.R, self.Q.T @ V)


def project(basis: SpectralBasis, vertices: np.ndarray) -> SpectralCoeffs:
    return SpectralCoeffs(Projector(basis).solve(vertices), basis.basis_id)


def synthesize(basis: SpectralBasis, coeffs) -> np.ndarray:
    A = coeffs.coeffs if isinstance(coeffs, SpectralCoeffs) else np.asarray(coeffs)
    if A.shape[0] != basis.k:
        raise SpectralError(f"basis has {basis.k} columns, coefficients have {A.shape[0]} rows")
    return basis.vectors @ A


def representation_error(basis: SpectralBasis, mesh) -> float:
    """Mean squared vertex deviation between V and its least-squares fit in the basis."""
    V = mesh.vertices if isinstance(mesh, Mesh) else np.asarray(mesh)
    A = Projector(basis).solve(V)
    return float(np.mean(np.sum((V - basis.vectors @ A) ** 2, axis=1)))


def build_shared_basis(meshes: Sequence[Mesh], k: int, steps: int = 50, lr: float = 1e-5,
                       bases: Optional[Sequence[SpectralBasis]] = None,
                       betas=(0.9, 0.999), eps: float = 1e-8) -> SpectralBasis:
    """Fit Phi_shared = sum_i gamma_i Phi_i to the sampled meshes with Adam.

    The loss is the mean squared vertex residual of each mesh after a
    least-squares fit in Phi_shared, averaged over meshes.  gamma starts at
    (1, 0, ..., 0).  The loss trace (steps + 1 entries) is stored on the
    returned basis.
    """
    P = len(meshes)
    if P < 1:
        raise SpectralError("need at least one mesh")
    n = meshes[0].n
    if any(m.n != n for m in meshes):
        raise SpectralError("all meshes must have the same vertex count")
    if bases is None:
        bases = [mesh_basis(m, k) for m in meshes]
    Phis = np.stack([b.vectors[:, :k] for b in bases])  # P x n x k
    V = np.concatenate([m.vertices for m in meshes], axis=1)  # n x 3P
    gamma = np.zeros(P)
    gamma[0] = 1.0
    m1 = np.zeros(P)
    m2 = np.zeros(P)
    trace = []

    def loss_and_grad(g):
        Phi = np.tensordot(g, Phis, axes=1)
        A = Projector(SpectralBasis(Phi, np.zeros(k), bases[0].mass)).solve(V)
        R = V - Phi @ A
        loss = float(np.sum(R ** 2)) / (P * n)
        if not np.isfinite(loss):
            raise SpectralError("shared-basis loss became non-finite")
        # A is a least-squares optimum, so only the explicit Phi-dependence contributes
        gPhi = -2.0 / (P * n) * R @ A.T
        return loss, np.tensordot(Phis, gPhi, axes=([1, 2], [0, 1]))

    for t in range(1, steps + 1):
        loss, g = loss_and_grad(gamma)
        trace.append(loss)
        m1 = betas[0] * m1 + (1 - betas[0]) * g
        m2 = betas[1] * m2 + (1 - betas[1]) * g * g
        mhat = m1 / (1 - betas[0] ** t)
        vhat = m2 / (1 - betas[1] ** t)
        gamma = gamma - lr * mhat / (np.sqrt(vhat) + eps)
    trace.append(loss_and_grad(gamma)[0])
    Phi = np.tensordot(gamma, Phis, axes=1)
    lam = np.tensordot(gamma, np.stack([b.eigenvalues[:k] for b in bases]), axes=1)
    mass = np.mean([b.mass for b in bases], axis=0)
    ids = tuple(m.name for m in meshes)
    return SpectralBasis(Phi, lam, mass, True, gamma, ids, tuple(trace))


# ---------------------------------------------------------------------------
# checkpoint

def basis_to_json(basis: SpectralBasis) -> bytes:
    doc = {
        "n": basis.n,
        "k": basis.k,
        "eigenvalues": basis.eigenvalues,
        "vectors": basis.vectors.reshape(-1),
        "mass": basis.mass,
        "is_shared": basis.is_shared,
        "mixing_weights": basis.mixing_weights,
        "source_mesh_ids": list(basis.source_mesh_ids),
        "loss_trace": list(basis.loss_trace),
    }
    return dumps17(doc).encode("utf-8")


def basis_from_json(data) -> SpectralBasis:
    try:
        doc = json.loads(data)
        n, k = int(doc["n"]), int(doc["k"])
        vectors = np.array(doc["vectors"], dtype=np.float64)
        if vectors.size != n * k:
            raise SpectralError(f"vectors has {vectors.size} entries, expected n*k={n * k}")
        mw = doc.get("mixing_weights")
        return SpectralBasis(vectors.reshape(n, k), np.array(doc["eigenvalues"], dtype=np.float64),
                             np.array(doc["mass"], dtype=np.float64), bool(doc["is_shared"]),
                             None if mw is None else np.array(mw, dtype=np.float64),
                             tuple(doc.get("source_mesh_ids", ())), tuple(doc.get("loss_trace", ())))
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise SpectralError(f"invalid basis checkpoint: {exc}") from exc

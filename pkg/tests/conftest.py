import numpy as np
import pytest

from saga.datagen import icosphere
from saga.mesh import Mesh


def regular_tetrahedron(edge: float = 1.0) -> Mesh:
    v = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float)
    v *= edge / (2.0 * np.sqrt(2.0))
    f = np.array([[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]])
    return Mesh(v, f, "tet")


def unit_cube() -> Mesh:
    v = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=float)
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    f = [t for a, b, c, d in quads for t in ((a, b, c), (a, c, d))]
    return Mesh(v, np.array(f), "cube")


def grid_patch(size: int = 6, jitter: float = 0.0, seed: int = 0) -> Mesh:
    rng = np.random.default_rng(seed)
    xs, ys = np.meshgrid(np.arange(size, dtype=float), np.arange(size, dtype=float), indexing="ij")
    v = np.stack([xs.ravel(), ys.ravel(), np.zeros(size * size)], axis=1)
    v[:, :2] += jitter * rng.uniform(-1, 1, (size * size, 2))
    f = []
    for i in range(size - 1):
        for j in range(size - 1):
            a, b, c, d = i * size + j, (i + 1) * size + j, (i + 1) * size + j + 1, i * size + j + 1
            f += [(a, b, c), (a, c, d)]
    return Mesh(v, np.array(f), "grid")


def bumpy_sphere(subdivisions: int = 1, amp: float = 0.1, seed: int = 0) -> Mesh:
    """Icosphere with random radial noise; still star-shaped and manifold."""
    base = icosphere(subdivisions)
    rng = np.random.default_rng(seed)
    r = 1.0 + amp * rng.uniform(-1, 1, base.n)
    return Mesh(base.vertices * r[:, None], base.faces, f"bumpy{seed}")


def random_rotation(rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


@pytest.fixture
def tet():
    return regular_tetrahedron()


@pytest.fixture(scope="session")
def sphere3():
    return icosphere(3)


# criterion number -> (name, "PASS"/"FAIL", detail), filled by test_acceptance
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        name, status, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"{status} criterion {n:2d} {name}: {detail}")

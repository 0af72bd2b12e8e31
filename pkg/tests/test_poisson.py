import numpy as np
import pytest
import torch

from mesh import Mesh, face_gradient, grid_mesh, icosahedron
from poisson import TopologyMismatch, assemble, poisson_solve
from skinning import axis_angle_to_matrix


def identity_field(mesh):
    return np.tile(np.eye(3), (mesh.n_faces, 1, 1))


@pytest.mark.parametrize('mesh', [icosahedron(), grid_mesh(3, 2)])
def test_identity_field_reproduces_the_rest_mesh(mesh):
    system = assemble(mesh)
    assert np.allclose(system.solve(identity_field(mesh)), mesh.vertices, atol=1e-9)


def test_rotated_field_rotates_about_the_centroid():
    mesh = icosahedron()
    R = axis_angle_to_matrix([0.0, 0.7, 0.2])
    J = face_gradient(mesh, mesh.vertices @ R.T).numpy()
    x = assemble(mesh).solve(J)
    centroid = mesh.vertices.mean(axis=0)
    assert np.allclose(x.mean(axis=0), centroid, atol=1e-12)
    assert np.allclose(x - centroid, (mesh.vertices - centroid) @ R.T, atol=1e-9)


def test_anchor_moves_the_first_component():
    mesh = grid_mesh(2, 2)
    x = assemble(mesh).solve(identity_field(mesh), anchor=[5.0, 0.0, 0.0])
    assert np.allclose(x.mean(axis=0), [5.0, 0.0, 0.0])
    assert np.allclose(x - x.mean(axis=0), mesh.vertices - mesh.vertices.mean(axis=0), atol=1e-9)


def test_components_keep_their_rest_centroids():
    a = grid_mesh(1, 1)
    b = a.vertices + [3.0, 0.0, 0.0]
    mesh = Mesh(np.concatenate([a.vertices, b]), np.concatenate([a.faces, a.faces + 4]))
    system = assemble(mesh)
    assert system.n_components == 2
    J = identity_field(mesh)
    J[2:] *= 2.0
    x = system.solve(J)
    assert np.allclose(x[4:].mean(axis=0), b.mean(axis=0))
    assert np.allclose(x[:4], a.vertices, atol=1e-9)


def test_poisson_solve_gradient():
    mesh = grid_mesh(2, 1)
    system = assemble(mesh)
    J = torch.as_tensor(identity_field(mesh)) + 0.1 * torch.randn(mesh.n_faces, 3, 3, dtype=torch.float64,
                                                                    generator=torch.Generator().manual_seed(1))
    J.requires_grad_(True)
    assert torch.autograd.gradcheck(lambda j: poisson_solve(system, j), (J,))


def test_wrong_shape_raises_topology_mismatch():
    system = assemble(icosahedron())
    with pytest.raises(TopologyMismatch):
        system.solve(np.tile(np.eye(3), (3, 1, 1)))
    with pytest.raises(TopologyMismatch):
        system.solve_adjoint(np.zeros((5, 3)))


def test_matches():
    system = assemble(grid_mesh(2, 2))
    assert system.matches(grid_mesh(2, 2))
    assert not system.matches(grid_mesh(2, 3))


def dense_least_squares(mesh, J):
    'Area-weighted least squares over an explicitly built per-face gradient matrix.'
    p, f = mesh.vertices, mesh.faces
    G = np.zeros((3 * mesh.n_faces, mesh.n_vertices))
    differences = np.array([[-1.0, 1.0, 0.0], [-1.0, 0.0, 1.0], [0.0, 0.0, 0.0]])
    for j, (a, b, c) in enumerate(f):
        e1, e2 = p[b] - p[a], p[c] - p[a]
        n = np.cross(e1, e2)
        G[3 * j:3 * j + 3, [a, b, c]] = np.linalg.inv(np.stack([e1, e2, n / np.linalg.norm(n)])) @ differences
    w = np.sqrt(np.repeat(mesh.face_areas(), 3))[:, None]
    targets = np.transpose(J, (0, 2, 1)).reshape(-1, 3)
    x = np.linalg.lstsq(w * G, w * targets, rcond=None)[0]
    return x - x.mean(axis=0) + mesh.vertices.mean(axis=0)


def random_surface(rng):
    nx, ny = rng.integers(2, 7, size=2)
    grid = grid_mesh(int(nx), int(ny))
    jitter = rng.uniform(-0.25, 0.25, size=(grid.n_vertices, 2)) / max(nx, ny)
    heights = 0.3 * rng.normal(size=(grid.n_vertices, 1))
    return grid.with_vertices(grid.vertices + np.hstack([jitter, heights]))


def test_sparse_solve_matches_dense_least_squares(rng):
    for _ in range(10):
        mesh = random_surface(rng)
        assert mesh.n_vertices <= 100
        J = identity_field(mesh) + 0.3 * rng.normal(size=(mesh.n_faces, 3, 3))
        x = assemble(mesh).solve(J)
        expected = dense_least_squares(mesh, J)
        assert np.linalg.norm(x - expected) <= 1e-8 * np.linalg.norm(expected)


def test_laplacian_of_a_right_triangle_has_cotangent_weights():
    mesh = Mesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
    # Corner angles are 90, 45 and 45 degrees; each edge weighs half the cotangent of the opposite angle.
    expected = np.array([[1.0, -0.5, -0.5],
                         [-0.5, 0.5, 0.0],
                         [-0.5, 0.0, 0.5]])
    np.testing.assert_allclose(assemble(mesh).laplacian.toarray(), expected, atol=1e-15)

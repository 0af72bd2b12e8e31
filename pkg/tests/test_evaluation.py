import json
import math
import os

import numpy as np
import pytest

from evaluation import (sample_surface, closest_on_triangles, closest_points, normal_consistency, mesh_metrics,
                        psnr, masked_ssim, evaluate_run)
from mesh import Mesh, icosahedron, write_obj
from remesh import remesh
from dataset import save_dataset
from render import save_png
from util import numpy_rng


def test_surface_samples_lie_on_the_mesh():
    mesh = Mesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
    points, normals, faces = sample_surface(mesh, 500, numpy_rng(0))
    assert (points[:, 2] == 0).all()
    assert (points[:, :2] >= 0).all() and (points[:, :2].sum(axis=1) <= 1 + 1e-12).all()
    assert np.allclose(normals, [0, 0, 1])
    assert (faces == 0).all()


def test_closest_points_on_a_triangle_cover_every_region():
    mesh = Mesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
    points = np.array([[0.2, 0.2, 0.5],    # above the interior
                       [-1.0, -1.0, 0.0],  # beyond corner 0
                       [2.0, -0.5, 0.0],   # beyond corner 1
                       [0.5, -1.0, 0.3],   # outside edge 0-1
                       [1.0, 1.0, 0.0],    # outside edge 1-2
                       [-0.5, 0.5, -0.2]])  # outside edge 0-2
    distances, faces, closest = closest_points(mesh, points)
    expected = np.array([[0.2, 0.2, 0], [0, 0, 0], [1, 0, 0], [0.5, 0, 0], [0.5, 0.5, 0], [0, 0.5, 0]])
    np.testing.assert_allclose(closest, expected, atol=1e-15)
    np.testing.assert_allclose(distances, np.linalg.norm(points - expected, axis=1))
    assert (faces == 0).all()


def test_closest_points_match_a_brute_force_scan(rng):
    mesh = icosahedron()
    points = rng.normal(size=(200, 3)) * 2
    distances, faces, closest = closest_points(mesh, points, k=2)
    corners = mesh.vertices[mesh.faces]
    for i, p in enumerate(points):
        q = closest_on_triangles(np.tile(p, (mesh.n_faces, 1)), corners[:, 0], corners[:, 1], corners[:, 2])
        d = np.linalg.norm(q - p, axis=1)
        assert distances[i] == pytest.approx(d.min(), abs=1e-12)
        assert d[faces[i]] == pytest.approx(d.min(), abs=1e-12)
    np.testing.assert_allclose(np.linalg.norm(closest - points, axis=1), distances, atol=1e-12)


def test_normal_consistency_is_signed():
    normals = np.tile([0.0, 0.0, 1.0], (3, 1))
    assert normal_consistency(normals, normals, normals, normals) == pytest.approx(1.0)
    assert normal_consistency(normals, -normals, normals, -normals) == pytest.approx(-1.0)
    sideways = np.tile([1.0, 0.0, 0.0], (3, 1))
    assert normal_consistency(normals, sideways, sideways, normals) == pytest.approx(0.0)


def test_flipped_mesh_has_negative_normal_consistency():
    mesh = icosahedron()
    flipped = Mesh(mesh.vertices, mesh.faces[:, ::-1])
    metrics = mesh_metrics(flipped, mesh, n_samples=500)
    assert metrics['normal_consistency'] == pytest.approx(-1.0)
    assert metrics['chamfer'] < 1e-20


def test_identical_meshes_score_perfectly():
    mesh = icosahedron()
    metrics = mesh_metrics(mesh, mesh, n_samples=2000, seed=3)
    assert metrics['chamfer'] < 1e-20
    assert metrics['normal_consistency'] == pytest.approx(1.0)


def test_retriangulated_surface_has_no_sampling_floor():
    mesh = icosahedron()
    refined = remesh(mesh, np.arange(len(mesh.edges))).mesh
    assert refined.n_faces > mesh.n_faces
    metrics = mesh_metrics(refined, mesh, n_samples=500, seed=1)
    assert metrics['chamfer'] < 1e-20
    assert metrics['normal_consistency'] == pytest.approx(1.0)


def test_scaled_mesh_has_positive_chamfer():
    mesh = icosahedron()
    metrics = mesh_metrics(mesh.with_vertices(1.1 * mesh.vertices), mesh, n_samples=2000)
    assert metrics['chamfer'] > 1e-4


def test_offset_plane_chamfer_is_the_squared_offset():
    square = Mesh([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], [[0, 1, 2], [0, 2, 3]])
    lifted = square.with_vertices(square.vertices + [0.0, 0.0, 0.01])
    metrics = mesh_metrics(lifted, square, n_samples=300)
    assert metrics['chamfer'] == pytest.approx(1e-4)


def test_band_chamfer():
    mesh = icosahedron()
    band = mesh.vertices[:, 1] > 0
    metrics = mesh_metrics(mesh, mesh, n_samples=2000, gt_band=band)
    assert metrics['chamfer_band'] < 1e-20
    moved = mesh.vertices.copy()
    moved[band] *= 1.2
    metrics = mesh_metrics(mesh.with_vertices(moved), mesh, n_samples=2000, gt_band=band)
    assert metrics['chamfer_band'] > metrics['chamfer'] > 0


def test_psnr():
    gt = np.zeros((4, 4, 3))
    assert math.isinf(psnr(gt, gt))
    assert psnr(gt + 0.1, gt) == pytest.approx(20.0)
    mask = np.zeros((4, 4))
    mask[0, 0] = 1.0
    noisy = gt.copy()
    noisy[1:] = 0.5
    assert math.isinf(psnr(noisy, gt, mask))
    assert math.isnan(psnr(gt, gt, np.zeros((4, 4))))


def test_masked_ssim_of_identical_images():
    image = np.random.default_rng(0).random((16, 16, 3))
    assert masked_ssim(image, image, np.ones((16, 16))) == pytest.approx(1.0)


def test_evaluate_run(tmp_path, tiny_dataset):
    gt_dir, pred_dir = tmp_path / 'gt', tmp_path / 'pred'
    save_dataset(tiny_dataset, gt_dir)
    os.makedirs(pred_dir / 'meshes')
    os.makedirs(pred_dir / 'renders')
    for t, mesh in enumerate(tiny_dataset.gt_meshes):
        write_obj(pred_dir / 'meshes' / f'{t:04d}.obj', mesh)
        save_png(pred_dir / 'renders' / f'{t:04d}.png', tiny_dataset.frames[t].color)

    result = evaluate_run(pred_dir, gt_dir, n_samples=1000)
    assert len(result['frames']) == 3
    assert result['mean']['chamfer'] < 1e-12
    assert result['mean']['psnr'] > 40
    with open(pred_dir / 'metrics.json') as f:
        assert json.load(f)['mean'] == result['mean']

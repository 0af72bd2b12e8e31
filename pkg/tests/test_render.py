import warnings

import numpy as np
import pytest
import torch

from conftest import centered_square
from mesh import Mesh
from render import (EMPTY_DEPTH, Camera, project, orbit_cameras, rasterize, shade_diffuse, render_depth,
                    render_normals, render_textured, sample_texture, soft_mask, silhouette_edges, vertex_normals,
                    read_cameras, write_cameras, save_png, load_png)


def test_look_at_puts_the_target_on_the_principal_point(front_camera):
    uv, z = project(front_camera.to_camera(np.zeros((1, 3))), front_camera)
    assert np.allclose(uv, [[16.0, 16.0]])
    assert np.allclose(z, [3.0])
    assert np.allclose(front_camera.center, [0.0, 0.0, 3.0])


def test_world_up_is_image_up(front_camera):
    uv, _ = project(front_camera.to_camera(np.array([[0.0, 1.0, 0.0]])), front_camera)
    assert uv[0, 1] < 16.0


def test_camera_rejects_bad_intrinsics():
    with pytest.raises(ValueError):
        Camera(0.0, 1.0, 0.0, 0.0, 4, 4, np.eye(3), np.zeros(3))
    with pytest.raises(ValueError):
        Camera(1.0, 1.0, 0.0, 0.0, 4, 4, 2 * np.eye(3), np.zeros(3))


def test_rasterize_square(square, front_camera):
    fragments = rasterize(square.vertices, square.faces, front_camera)
    assert fragments.covered[16, 16]
    assert not fragments.covered[0, 0]
    assert np.isclose(fragments.depth[16, 16], 3.0)
    assert (fragments.depth[~fragments.covered] == EMPTY_DEPTH).all()
    assert np.allclose(fragments.barycentrics[fragments.covered].sum(axis=1), 1.0)
    assert ((fragments.barycentrics[fragments.covered] >= 0).all())
    # Half width 0.5 at distance 3 with focal 38.4 covers 12 or 13 pixel columns.
    assert 12 <= fragments.covered[16].sum() <= 13


def test_rasterize_keeps_the_nearest_face(front_camera):
    far = centered_square().vertices
    near = far + [0.0, 0.0, 1.0]
    faces = np.array([[0, 1, 3], [0, 3, 2], [4, 5, 7], [4, 7, 6]])
    fragments = rasterize(np.concatenate([far, near]), faces, front_camera)
    assert set(np.unique(fragments.face_id[fragments.covered])) <= {2, 3}
    assert np.isclose(fragments.depth[16, 16], 2.0)


def test_rasterize_ties_go_to_the_lower_face_id(square, front_camera):
    faces = np.concatenate([square.faces[::-1], square.faces])
    fragments = rasterize(square.vertices, faces, front_camera)
    assert set(np.unique(fragments.face_id[fragments.covered])) == {0, 1}


def test_rasterize_skips_geometry_behind_the_camera(square, front_camera):
    fragments = rasterize(square.vertices + [0.0, 0.0, 5.0], square.faces, front_camera)
    assert not fragments.covered.any()
    assert (fragments.depth == EMPTY_DEPTH).all()


def test_diffuse_shading_of_a_facing_plane(square, front_camera):
    fragments = rasterize(square.vertices, square.faces, front_camera)
    image = shade_diffuse(fragments, square.vertices, square.faces, front_camera)
    assert image.shape == (32, 32)
    assert image[16, 16] > 0.99
    assert (image[~torch.as_tensor(fragments.covered)] == 0).all()


def test_depth_gradient_follows_the_view_axis(square, front_camera):
    fragments = rasterize(square.vertices, square.faces, front_camera)
    shift = torch.zeros(3, dtype=torch.float64, requires_grad=True)
    positions = torch.as_tensor(square.vertices) + shift
    depth = render_depth(fragments, positions, square.faces, front_camera)
    depth[torch.as_tensor(fragments.covered)].sum().backward()
    assert np.allclose(shift.grad.numpy(), [0.0, 0.0, -fragments.covered.sum()], atol=1e-8)


def test_normal_map_points_at_the_camera(square, front_camera):
    fragments = rasterize(square.vertices, square.faces, front_camera)
    normals = render_normals(fragments, square.vertices, square.faces, front_camera)
    assert np.allclose(normals[16, 16].numpy(), [0.0, 0.0, -1.0])


def test_sample_texture_hits_texel_centers():
    texture = torch.arange(12, dtype=torch.float64).reshape(2, 2, 3)
    uv = torch.tensor([[0.25, 0.25], [0.75, 0.25], [0.25, 0.75]], dtype=torch.float64)
    assert torch.allclose(sample_texture(texture, uv), texture.reshape(4, 3)[:3])
    outside = sample_texture(texture, torch.tensor([[-1.0, -1.0]], dtype=torch.float64))
    assert torch.allclose(outside, texture[0, 0][None])


def test_textured_render_of_a_constant_map(square, front_camera):
    fragments = rasterize(square.vertices, square.faces, front_camera)
    uvs = np.full((square.n_faces, 3, 2), 0.5)
    texture = torch.full((4, 4, 3), 0.3, dtype=torch.float64)
    image = render_textured(fragments, square.vertices, square.faces, uvs, texture, front_camera)
    covered = torch.as_tensor(fragments.covered)
    assert torch.allclose(image[covered], torch.tensor(0.3, dtype=torch.float64))
    assert (image[~covered] == 0).all()


def test_soft_mask_is_a_differentiable_silhouette(square, front_camera):
    fragments = rasterize(square.vertices, square.faces, front_camera)
    assert len(silhouette_edges(square, square.vertices, front_camera, fragments)) == 4

    positions = torch.as_tensor(square.vertices).clone().requires_grad_(True)
    alpha = soft_mask(fragments, square, positions, front_camera, sigma=1.0)
    covered = torch.as_tensor(fragments.covered)
    assert (alpha[covered] > 0.5).all() and (alpha[~covered] < 0.5).all()
    assert alpha[16, 16] > 0.99 and alpha[0, 0] < 0.01

    alpha.sum().backward()
    assert positions.grad[:, :2].abs().sum() > 0


def test_soft_mask_without_contour_is_the_hard_mask(square, front_camera):
    fragments = rasterize(square.vertices + [0.0, 0.0, 5.0], square.faces, front_camera)
    alpha = soft_mask(fragments, square, square.vertices + [0.0, 0.0, 5.0], front_camera, sigma=1.0)
    assert torch.count_nonzero(alpha) == 0


def test_orbit_cameras_circle_the_center(front_camera):
    cameras = orbit_cameras(front_camera, [0.0, 0.0, 0.0], 4)
    assert len(cameras) == 4
    assert np.allclose(cameras[0].rotation, front_camera.rotation)
    for camera in cameras:
        assert np.isclose(np.linalg.norm(camera.center), 3.0)
        uv, _ = project(camera.to_camera(np.zeros((1, 3))), camera)
        assert np.allclose(uv, [[16.0, 16.0]])


def test_camera_file_round_trip(tmp_path, front_camera):
    other = orbit_cameras(front_camera, [0.0, 0.0, 0.0], 3)[1]
    write_cameras(tmp_path / 'camera.txt', [front_camera, other])
    loaded = read_cameras(tmp_path / 'camera.txt')
    assert len(loaded) == 2
    assert np.array_equal(loaded[1].rotation, other.rotation)
    assert loaded[0].width == 32 and loaded[0].fx == front_camera.fx


def test_png_round_trip(tmp_path):
    image = np.random.default_rng(1).random((8, 6, 3))
    save_png(tmp_path / 'image.png', image)
    assert np.allclose(load_png(tmp_path / 'image.png'), image, atol=1 / 255)


def bumpy_square(rng):
    mesh = centered_square(2)
    heights = np.zeros((mesh.n_vertices, 3))
    heights[:, 2] = 0.05 * rng.normal(size=mesh.n_vertices)
    return mesh.with_vertices(mesh.vertices + heights)


@pytest.mark.parametrize('render', [shade_diffuse, render_depth, render_normals])
def test_geometry_renders_match_finite_differences(render, rng, front_camera):
    mesh = bumpy_square(rng)
    fragments = rasterize(mesh.vertices, mesh.faces, front_camera)
    covered = torch.as_tensor(fragments.covered)
    x = torch.tensor(mesh.vertices, requires_grad=True)
    assert torch.autograd.gradcheck(lambda p: render(fragments, p, mesh.faces, front_camera)[covered], (x,))


def test_textured_render_matches_finite_differences(rng, front_camera):
    mesh = bumpy_square(rng)
    fragments = rasterize(mesh.vertices, mesh.faces, front_camera)
    covered = torch.as_tensor(fragments.covered)
    uvs = rng.uniform(0.1, 0.9, size=(mesh.n_faces, 3, 2))
    x = torch.tensor(mesh.vertices, requires_grad=True)
    texture = torch.tensor(rng.uniform(0.2, 0.8, size=(4, 4, 3)), requires_grad=True)
    assert torch.autograd.gradcheck(
        lambda p, t: render_textured(fragments, p, mesh.faces, uvs, t, front_camera)[covered], (x, texture))


def test_sample_texture_matches_finite_differences(rng):
    texture = torch.tensor(rng.uniform(size=(3, 3, 2)), requires_grad=True)
    uv = torch.tensor(rng.uniform(0.05, 0.95, size=(10, 2)), requires_grad=True)
    assert torch.autograd.gradcheck(sample_texture, (texture, uv))


def test_soft_mask_of_a_triangle_matches_exact_edge_distances(front_camera):
    triangle = Mesh([[-0.3, -0.2, 0.0], [0.35, -0.25, 0.0], [0.0, 0.3, 0.0]], [[0, 1, 2]])
    fragments = rasterize(triangle.vertices, triangle.faces, front_camera)
    alpha = soft_mask(fragments, triangle, triangle.vertices, front_camera, sigma=1.5).numpy()

    uv, _ = project(front_camera.to_camera(triangle.vertices), front_camera)
    rows, cols = np.mgrid[0:32, 0:32]
    pixels = np.stack([cols + 0.5, rows + 0.5], axis=-1)
    distance = np.full((32, 32), np.inf)
    for a, b in ((0, 1), (1, 2), (2, 0)):
        ab = uv[b] - uv[a]
        t = np.clip(((pixels - uv[a]) @ ab) / (ab @ ab), 0.0, 1.0)
        distance = np.minimum(distance, np.linalg.norm(pixels - (uv[a] + t[..., None] * ab), axis=-1))
    signed = np.where(fragments.covered, distance, -distance)
    np.testing.assert_allclose(alpha, 1 / (1 + np.exp(-signed / 1.5)), atol=1e-3)


def test_rendering_mesh_buffers_emits_no_warnings(square, front_camera):
    fragments = rasterize(square.vertices, square.faces, front_camera)
    with warnings.catch_warnings():
        warnings.simplefilter('error')
        normals = vertex_normals(torch.as_tensor(square.vertices.copy()), square.faces)
        shade_diffuse(fragments, square.vertices, square.faces, front_camera, normals)
        render_depth(fragments, square.vertices, square.faces, front_camera)
        soft_mask(fragments, square, square.vertices, front_camera, sigma=1.0)

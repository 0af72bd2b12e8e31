import numpy as np
import pytest
import torch

from mesh import Mesh, grid_mesh
from skinning import (MAX_INFLUENCES, Skeleton, SkinWeights, SkinningError, axis_angle_to_matrix, skin,
                      limit_influences, derive_weights, idw_blend, read_rig, write_rig, read_poses, write_poses)


def chain(n_bones=2):
    rest = np.tile(np.eye(4), (n_bones, 1, 1))
    rest[:, 1, 3] = -np.arange(n_bones, dtype=np.float64)
    return Skeleton(rest, np.arange(n_bones) - 1)


def test_axis_angle_gives_rotations(rng):
    R = axis_angle_to_matrix(rng.normal(size=(5, 3)))
    assert np.allclose(R @ np.transpose(R, (0, 2, 1)), np.eye(3))
    assert np.allclose(np.linalg.det(R), 1.0)
    quarter = axis_angle_to_matrix([0.0, 0.0, np.pi / 2])
    assert np.allclose(quarter @ [1.0, 0.0, 0.0], [0.0, 1.0, 0.0])
    assert np.allclose(axis_angle_to_matrix(np.zeros(3)), np.eye(3))


def test_rest_pose_is_the_identity(rng):
    skeleton = chain(3)
    x = rng.normal(size=(10, 3))
    weights = SkinWeights(limit_influences(rng.random((10, 3))))
    assert np.allclose(skin(x, skeleton, skeleton.rest_pose(), weights).numpy(), x)


def test_root_translation_moves_everything(rng):
    skeleton = chain(2)
    x = rng.normal(size=(6, 3))
    weights = SkinWeights(limit_influences(rng.random((6, 2))))
    pose = skeleton.rest_pose()
    pose[:3] = [1.0, -2.0, 0.5]
    assert np.allclose(skin(x, skeleton, pose, weights).numpy(), x + [1.0, -2.0, 0.5])


def test_child_rotates_about_its_joint():
    skeleton = chain(2)
    pose = skeleton.rest_pose()
    pose[6:9] = [0.0, 0.0, np.pi / 2]
    x = np.array([[1.0, -1.0, 0.0]])
    posed = skin(x, skeleton, pose, SkinWeights(np.array([[0.0, 1.0]])))
    assert np.allclose(posed.numpy(), [[0.0, 0.0, 0.0]])


def test_skin_is_differentiable_in_positions(rng):
    skeleton = chain(2)
    pose = np.concatenate([[0.1, 0.0, 0.0], rng.normal(size=6) * 0.3])
    weights = SkinWeights(limit_influences(rng.random((4, 2))))
    x = torch.as_tensor(rng.normal(size=(4, 3)), dtype=torch.float64).requires_grad_(True)
    assert torch.autograd.gradcheck(lambda p: skin(p, skeleton, pose, weights), (x,))


def test_skin_rejects_bad_weights():
    skeleton = chain(2)
    with pytest.raises(SkinningError):
        skin(np.zeros((3, 3)), skeleton, skeleton.rest_pose(), SkinWeights(np.full((2, 2), 0.5)))
    with pytest.raises(SkinningError):
        skin(np.zeros((2, 3)), skeleton, skeleton.rest_pose(), SkinWeights(np.full((2, 2), 0.6)))
    with pytest.raises(SkinningError):
        skin(np.zeros((2, 3)), skeleton, np.zeros(4), SkinWeights(np.full((2, 2), 0.5)))


def test_parents_must_precede_children():
    with pytest.raises(SkinningError):
        Skeleton(np.tile(np.eye(4), (2, 1, 1)), [1, -1])


def test_limit_influences_keeps_the_largest_and_breaks_ties_by_index():
    W = np.array([[0.1, 0.2, 0.2, 0.2, 0.2, 0.1]])
    limited = limit_influences(W)
    assert np.count_nonzero(limited) == MAX_INFLUENCES
    assert np.allclose(limited, [[0.0, 0.25, 0.25, 0.25, 0.25, 0.0]])
    tied = limit_influences(np.full((1, 6), 1 / 6))
    assert np.flatnonzero(tied[0]).tolist() == [0, 1, 2, 3]


def test_derive_weights_copies_coincident_body_vertices(rng):
    body = grid_mesh(3, 3)
    body_weights = limit_influences(rng.random((body.n_vertices, 6)))
    garment = Mesh(body.vertices[[0, 5]] + [[0, 0, 0], [0.01, 0.02, 0.03]], [[0, 1, 0]])
    weights = derive_weights(garment, body, body_weights)
    assert np.array_equal(weights.W[0], body_weights[0])
    assert weights.violations() == []


def test_idw_blend_is_an_interpolation():
    distances = np.array([[1.0, 1.0], [0.0, 2.0]])
    neighbors = np.array([[0, 1], [1, 0]])
    values = np.array([[0.0], [2.0]])
    assert np.allclose(idw_blend(distances, neighbors, values, 1e-12), [[1.0], [2.0]])


def test_rig_and_pose_files_round_trip(tmp_path, rng):
    skeleton = chain(3)
    weights = limit_influences(rng.random((5, 3)))
    write_rig(tmp_path / 'rig.txt', skeleton, weights)
    loaded, loaded_weights = read_rig(tmp_path / 'rig.txt')
    assert np.array_equal(loaded.rest, skeleton.rest)
    assert np.array_equal(loaded.parents, skeleton.parents)
    assert np.array_equal(loaded_weights, weights)

    poses = rng.normal(size=(4, skeleton.pose_dim))
    write_poses(tmp_path / 'poses.txt', poses)
    assert np.array_equal(read_poses(tmp_path / 'poses.txt'), poses)


def test_derive_weights_matches_a_brute_force_neighbor_scan(rng):
    body = grid_mesh(6, 6)
    body = Mesh(body.vertices + 0.01 * rng.normal(size=body.vertices.shape), body.faces)
    t = np.clip(body.vertices[:, 1], 0.0, 1.0)
    body_weights = np.stack([1 - t, t], axis=1)
    garment = grid_mesh(4, 4, size=(0.9, 0.9))
    garment = Mesh(garment.vertices + [0.05, 0.05, 0.1] + 0.01 * rng.normal(size=garment.vertices.shape),
                   garment.faces)

    weights = derive_weights(garment, body, body_weights, k=4)

    d = np.linalg.norm(garment.vertices[:, None] - body.vertices[None], axis=2)
    nearest = np.argsort(d, axis=1)[:, :4]
    inverse = 1 / np.take_along_axis(d, nearest, axis=1)
    expected = (inverse[..., None] * body_weights[nearest]).sum(axis=1) / inverse.sum(axis=1, keepdims=True)
    assert np.abs(weights.W - expected).max() < 1e-12
    assert weights.violations() == []

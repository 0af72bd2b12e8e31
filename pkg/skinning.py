'''Linear blend skinning of the canonical garment with a generic skeleton rig.

A pose vector is laid out as [root translation (3), per-bone axis-angle (3B)].'''

from dataclasses import dataclass
import logging

import numpy as np
import torch
from sklearn.neighbors import NearestNeighbors

from mesh import Mesh
from util import as_tensor


# Maximum number of nonzero bone weights per vertex.
MAX_INFLUENCES = 4


class SkinningError(ValueError):
    'Invalid skeleton, pose or skinning weights.'


def axis_angle_to_matrix(axis_angle) -> np.ndarray:
    'Rodrigues formula for (..., 3) axis-angle vectors.'
    aa = np.asarray(axis_angle, dtype=np.float64)
    angle = np.linalg.norm(aa, axis=-1, keepdims=True)
    axis = np.where(angle > 0, aa / np.where(angle > 0, angle, 1.0), 0.0)
    x, y, z = axis[..., 0], axis[..., 1], axis[..., 2]
    zero = np.zeros_like(x)
    K = np.stack([np.stack([zero, -z, y], -1),
                  np.stack([z, zero, -x], -1),
                  np.stack([-y, x, zero], -1)], -2)
    s, c = np.sin(angle)[..., None], np.cos(angle)[..., None]
    return np.eye(3) + s * K + (1 - c) * (K @ K)


@dataclass
class Skeleton:
    '''Bones with rest (bind) transforms, bone frame to world, and parent
    indices. Parents must precede their children; -1 marks a root.'''
    rest: np.ndarray  # (B, 4, 4)
    parents: np.ndarray  # (B,)

    def __post_init__(self):
        self.rest = np.asarray(self.rest, dtype=np.float64).reshape(-1, 4, 4)
        self.parents = np.asarray(self.parents, dtype=np.int64).reshape(-1)
        if len(self.parents) != len(self.rest):
            raise SkinningError('number of parents does not match number of bones')
        for b, p in enumerate(self.parents):
            if p >= b or p < -1:
                raise SkinningError(f'bone {b} has parent {p}; parents must precede children')
        if np.any(np.abs(np.linalg.det(self.rest)) < 1e-12):
            raise SkinningError('rest transforms must be invertible')

    @property
    def n_bones(self) -> int:
        return len(self.rest)

    @property
    def pose_dim(self) -> int:
        return 3 + 3 * self.n_bones

    def rest_pose(self) -> np.ndarray:
        return np.zeros(self.pose_dim)

    def bone_transforms(self, pose) -> np.ndarray:
        '''World transforms of every bone relative to its rest transform,
        (B, 4, 4). The rest pose gives identities.'''
        pose = np.asarray(pose, dtype=np.float64).reshape(-1)
        if pose.shape[0] != self.pose_dim:
            raise SkinningError(f'expected a pose vector of length {self.pose_dim}, got {pose.shape[0]}')

        translation, rotations = pose[:3], axis_angle_to_matrix(pose[3:].reshape(-1, 3))
        posed = np.zeros_like(self.rest)

        for b, p in enumerate(self.parents):
            local = self.rest[b] if p < 0 else np.linalg.inv(self.rest[p]) @ self.rest[b]
            spin = np.eye(4)
            spin[:3, :3] = rotations[b]
            if p < 0:
                shift = np.eye(4)
                shift[:3, 3] = translation
                posed[b] = shift @ local @ spin
            else:
                posed[b] = posed[p] @ local @ spin

        return posed @ np.linalg.inv(self.rest)


@dataclass
class SkinWeights:
    W: np.ndarray  # (N, B)

    def violations(self, tolerance: float = 1e-6) -> list[str]:
        W = self.W
        problems = []
        if (W < 0).any():
            problems.append(f'negative weights in rows {np.where((W < 0).any(axis=1))[0][:5].tolist()}')
        bad_sum = np.where(np.abs(W.sum(axis=1) - 1) > tolerance)[0]
        if len(bad_sum):
            problems.append(f'rows {bad_sum[:5].tolist()} do not sum to 1')
        too_many = np.where((W > 0).sum(axis=1) > MAX_INFLUENCES)[0]
        if len(too_many):
            problems.append(f'rows {too_many[:5].tolist()} have more than {MAX_INFLUENCES} influences')
        return problems


def skin(positions, skeleton: Skeleton, pose, weights: SkinWeights, shape=None) -> torch.Tensor:
    '''Posed positions sum_b W[v, b] T_b(pose) v. Differentiable in positions
    (autograd); the pose is held fixed. `shape` is accepted and ignored.'''
    x = as_tensor(positions, dtype=torch.float64)
    W = weights.W
    if W.shape != (x.shape[0], skeleton.n_bones):
        raise SkinningError(f'weights of shape {W.shape} do not match '
                            f'{x.shape[0]} vertices and {skeleton.n_bones} bones')
    if np.any(np.abs(W.sum(axis=1) - 1) > 1e-6):
        raise SkinningError('skinning weight rows must sum to 1')

    transforms = as_tensor(skeleton.bone_transforms(pose)[:, :3, :], dtype=x.dtype)
    blended = torch.einsum('vb,bij->vij', as_tensor(W, dtype=x.dtype), transforms)
    return (blended[:, :, :3] @ x[:, :, None]).squeeze(-1) + blended[:, :, 3]


def limit_influences(W, k: int = MAX_INFLUENCES) -> np.ndarray:
    'Keeps the k largest weights of every row and renormalizes.'
    W = np.asarray(W, dtype=np.float64).copy()
    if W.shape[1] > k:
        # Stable sort: ties keep the lower bone index.
        order = np.argsort(-W, axis=1, kind='stable')
        np.put_along_axis(W, order[:, k:], 0.0, axis=1)
    return W / W.sum(axis=1, keepdims=True)


def derive_weights(garment: Mesh, body: Mesh, body_weights, k: int = 4) -> SkinWeights:
    '''Inverse-distance-weighted average of the k nearest body vertices'
    weight rows; a coincident body vertex is copied exactly.'''
    body_weights = np.asarray(body_weights, dtype=np.float64)
    if body.n_vertices == 0:
        raise SkinningError('cannot derive skinning weights from an empty body mesh')
    if body_weights.shape[0] != body.n_vertices:
        raise SkinningError('body weights do not match the body mesh')

    k = min(k, body.n_vertices)
    distances, neighbors = NearestNeighbors(n_neighbors=k).fit(body.vertices).kneighbors(garment.vertices)
    tolerance = 1e-12 * max(body.bbox_diagonal(), 1.0)
    W = idw_blend(distances, neighbors, body_weights, tolerance)
    blended = distances[:, 0] > tolerance
    if blended.any():
        W[blended] = limit_influences(W[blended])

    logging.info(f'Derived skinning weights for {garment.n_vertices} vertices from {k} body neighbors')
    return SkinWeights(W)


def idw_blend(distances, neighbors, values, tolerance: float):
    '''Inverse-distance-weighted average of values[neighbors] per row.
    Rows whose nearest neighbor lies within `tolerance` copy it exactly.'''
    values = np.asarray(values)
    weights = 1.0 / np.maximum(distances, tolerance)
    exact = distances[:, 0] <= tolerance
    weights[exact] = 0.0
    weights[exact, 0] = 1.0
    weights /= weights.sum(axis=1, keepdims=True)
    shape = (-1,) + (1,) * (values.ndim - 1)
    out = sum(weights[:, i].reshape(shape) * values[neighbors[:, i]] for i in range(neighbors.shape[1]))
    out[exact] = values[neighbors[exact, 0]]
    return out


def read_rig(path):
    'Reads a rig file. Returns (Skeleton, body weights or None).'
    rest, parents, weights = [], [], []
    expected_rows = 0

    with open(path) as f:
        for line in f:
            tokens = line.split()
            if not tokens or tokens[0].startswith('#'):
                continue
            if tokens[0] == 'bone':
                parents.append(int(tokens[1]))
                rest.append(np.array([float(t) for t in tokens[2:18]]).reshape(4, 4))
            elif tokens[0] == 'weights':
                expected_rows = int(tokens[1])
            else:
                weights.append([float(t) for t in tokens])

    if len(weights) != expected_rows:
        raise SkinningError(f'{path}: expected {expected_rows} weight rows, found {len(weights)}')
    skeleton = Skeleton(np.array(rest), np.array(parents))
    return skeleton, (np.array(weights).reshape(-1, skeleton.n_bones) if expected_rows else None)


def write_rig(path, skeleton: Skeleton, body_weights=None):
    with open(path, 'w') as f:
        f.write(f'# {skeleton.n_bones} bones: parent, rest transform (4x4 row-major)\n')
        for parent, rest in zip(skeleton.parents, skeleton.rest):
            f.write(f'bone {parent} ' + ' '.join('%.17g' % v for v in rest.reshape(-1)) + '\n')
        if body_weights is not None:
            f.write(f'weights {len(body_weights)} {skeleton.n_bones}\n')
            for row in body_weights:
                f.write(' '.join('%.17g' % v for v in row) + '\n')


def read_poses(path) -> np.ndarray:
    'One pose per line: root translation followed by per-bone axis-angles.'
    with open(path) as f:
        rows = [[float(t) for t in line.split()] for line in f
                if line.strip() and not line.startswith('#')]
    return np.array(rows, dtype=np.float64)


def write_poses(path, poses):
    with open(path, 'w') as f:
        f.write('# root translation (3), axis-angle per bone (3 each)\n')
        for pose in poses:
            f.write(' '.join('%.17g' % v for v in pose) + '\n')

'''Intrinsic deformation fields: the directly optimized static Jacobian field,
the pose-conditioned dynamic field predicted by a hash-grid network, and the
PCA pose encoder shared with the texture network.'''

from dataclasses import dataclass
import logging

import numpy as np
import torch
from torch import nn
from sklearn.decomposition import PCA

from encoding import Encoding, FieldMLP
from util import as_tensor


class NonFiniteError(FloatingPointError):
    'Non-finite values in activations or gradients.'


class StaticField(nn.Module):
    'Frame-invariant per-face Jacobians, initialized to the identity.'

    def __init__(self, n_faces: int):
        super().__init__()
        self.jacobians = nn.Parameter(torch.eye(3, dtype=torch.float64).repeat(n_faces, 1, 1))

    @property
    def n_faces(self):
        return self.jacobians.shape[0]

    def replace(self, values):
        'Swaps in values for a new topology (after remeshing).'
        self.jacobians = nn.Parameter(as_tensor(values, dtype=torch.float64).clone())

    def forward(self):
        return self.jacobians


@dataclass
class PoseEncoder:
    '''Projection of pose vectors onto the top principal directions of the
    training sequence. `basis` is (P, k) with orthonormal columns.'''
    basis: np.ndarray
    mean: np.ndarray

    @property
    def k(self) -> int:
        return self.basis.shape[1]

    def encode(self, poses) -> torch.Tensor:
        poses = np.atleast_2d(np.asarray(poses, dtype=np.float64))
        codes = (poses - self.mean) @ self.basis
        return as_tensor(codes if len(codes) > 1 else codes[0])


def pose_encode_fit(all_poses, k: int = 8) -> PoseEncoder:
    'Fits the PCA pose encoder; k is clamped to the rank of the centered poses.'
    poses = np.asarray(all_poses, dtype=np.float64)
    if poses.ndim != 2 or poses.shape[0] < 2:
        raise ValueError(f'need at least 2 pose vectors to fit the pose encoder, got shape {poses.shape}')

    n_frames, n_params = poses.shape
    pca = PCA(n_components=min(n_frames, n_params), svd_solver='full').fit(poses)
    s = pca.singular_values_
    tolerance = s.max() * max(n_frames, n_params) * np.finfo(np.float64).eps
    rank = int((s > tolerance).sum())
    k = min(k, rank)

    logging.info(f'Pose encoder: {n_frames} poses of dimension {n_params}, rank {rank}, keeping {k}')
    return PoseEncoder(basis=pca.components_[:k].T.copy(), mean=pca.mean_.copy())


@dataclass
class UnitBox:
    'Axis-aligned box used to normalize coordinates into the encoder cube.'
    lo: np.ndarray
    hi: np.ndarray

    @staticmethod
    def around(points, padding: float = 0.1) -> 'UnitBox':
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        lo, hi = points.min(axis=0), points.max(axis=0)
        extent = np.maximum(hi - lo, 1e-9).max()
        center = 0.5 * (lo + hi)
        half = 0.5 * extent * (1 + padding)
        return UnitBox(lo=center - half, hi=center + half)

    def normalize(self, points: torch.Tensor) -> torch.Tensor:
        lo = as_tensor(self.lo, dtype=points.dtype)
        hi = as_tensor(self.hi, dtype=points.dtype)
        return ((points - lo) / (hi - lo)).clamp(0.0, 1.0)


class DynamicFieldNet(nn.Module):
    '''Predicts per-face Jacobian offsets from hash-encoded face centers, raw
    face normals and the pose code. The output layer starts at zero, so the
    initial prediction is the zero field.'''

    def __init__(self, config: dict, pose_dim: int, generator: torch.Generator = None):
        super().__init__()
        self.pose_dim = pose_dim
        self.encoder = Encoding.new(config.get('encoding', {}), 3, generator)
        self.mlp = FieldMLP(self.encoder.output_dim + 3 + pose_dim, 9,
                            hidden_dim=config.get('hidden_dim', 64),
                            n_hidden=config.get('n_hidden', 3),
                            generator=generator)

    def forward(self, centers_unit, normals, pose_code):
        m = centers_unit.shape[0]
        code = as_tensor(pose_code, dtype=centers_unit.dtype).reshape(1, -1).expand(m, self.pose_dim)
        features = torch.cat([self.encoder(centers_unit), normals, code], dim=1)
        out = self.mlp(features)
        if not torch.isfinite(out).all():
            raise NonFiniteError('non-finite activations in the dynamic field network')
        return out.reshape(m, 3, 3)


def eval_dynamic_field(net: DynamicFieldNet, centers_unit, normals, pose_code) -> torch.Tensor:
    return net(centers_unit, normals, pose_code)


def combine(static, dynamic):
    'Final field J^F = J^S + J^D.'
    if static.shape != dynamic.shape:
        raise ValueError(f'cannot combine fields of shapes {tuple(static.shape)} and {tuple(dynamic.shape)}')
    return static + dynamic


def save_checkpoint(path, static_field: StaticField, net: DynamicFieldNet,
                    pose_encoder: PoseEncoder, extra: dict = None):
    state = {
        'shapes': {
            'static': tuple(static_field.jacobians.shape),
            'pose_basis': pose_encoder.basis.shape,
            'network': {k: tuple(v.shape) for k, v in net.state_dict().items()},
        },
        'static': static_field.jacobians.detach().clone(),
        'network': net.state_dict(),
        'pose_basis': as_tensor(pose_encoder.basis),
        'pose_mean': as_tensor(pose_encoder.mean),
        **(extra or {}),
    }
    torch.save(state, path)


def load_checkpoint(path) -> dict:
    state = torch.load(path, map_location='cpu', weights_only=False)
    state['pose_encoder'] = PoseEncoder(basis=state['pose_basis'].numpy(),
                                        mean=state['pose_mean'].numpy())
    return state

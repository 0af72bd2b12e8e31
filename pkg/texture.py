'''Appearance on the final base mesh: the UV atlas, the optimized static
texture, the pose-conditioned dynamic texture network and its annealed
conditioning noise.'''

from dataclasses import dataclass
import logging
import math

import numpy as np
import torch
from torch import nn

from encoding import Encoding, FieldMLP
from fields import NonFiniteError
from mesh import Mesh
from render import save_png, save_grid
from util import as_tensor


class AtlasError(ValueError):
    'The texture resolution cannot hold the requested atlas.'


# Minimum chart side in texels: two texels of interior plus a gutter on each side.
MIN_CHART_SIZE = 4


@dataclass
class TextureAtlas:
    uvs: np.ndarray  # (M, 3, 2) in [0, 1]^2, v pointing down the rows
    resolution: int
    charts: np.ndarray = None  # (M, 3): x0, y0, side in texels for generated atlases

    def texel_coordinates(self) -> np.ndarray:
        'Corner positions in continuous texel units (texel i spans [i, i + 1]).'
        return self.uvs * self.resolution


def uv_atlas(mesh: Mesh, resolution: int = 512) -> TextureAtlas:
    '''Passes through OBJ-supplied UVs, or packs every face into its own
    square chart with a one-texel gutter.'''
    if mesh.uvs is not None:
        if (mesh.uvs < 0).any() or (mesh.uvs > 1).any():
            raise AtlasError('supplied UVs leave the unit square')
        return TextureAtlas(np.array(mesh.uvs), resolution)

    per_row = max(math.ceil(math.sqrt(mesh.n_faces)), 1)
    side = resolution // per_row
    if side < MIN_CHART_SIZE:
        raise AtlasError(f'texture resolution {resolution} cannot pack {mesh.n_faces} face charts; '
                         f'need at least {MIN_CHART_SIZE * per_row}')

    j = np.arange(mesh.n_faces)
    x0, y0 = (j % per_row) * side, (j // per_row) * side
    lo, hi = 1.5, side - 1.5
    corners = np.array([[lo, lo], [hi, lo], [lo, hi]])
    texels = np.stack([x0, y0], axis=1)[:, None, :] + corners[None]
    charts = np.stack([x0, y0, np.full(mesh.n_faces, side)], axis=1)

    logging.info(f'Packed {mesh.n_faces} charts of {side}x{side} texels into a {resolution}^2 atlas')
    return TextureAtlas(texels / resolution, resolution, charts)


def _footprint(texel_coordinates, resolution):
    'Index range of texels with nonzero bilinear weight for coordinates in the given box.'
    lo = np.floor(texel_coordinates.min(axis=0) - 0.5).astype(np.int64)
    hi = np.ceil(texel_coordinates.max(axis=0) - 0.5).astype(np.int64)
    return np.clip(lo, 0, resolution - 1), np.clip(hi, 0, resolution - 1)


def chart_ownership(atlas: TextureAtlas):
    '''Owning face per texel (-1 for gutters and free texels) and the number
    of texels claimed by more than one face.'''
    q = atlas.resolution
    owner = np.full((q, q), -1, dtype=np.int64)
    claims = np.zeros((q, q), dtype=np.int64)
    for j, corners in enumerate(atlas.texel_coordinates()):
        lo, hi = _footprint(corners, q)
        claims[lo[1]:hi[1] + 1, lo[0]:hi[0] + 1] += 1
        owner[lo[1]:hi[1] + 1, lo[0]:hi[0] + 1] = j
    return owner, int((claims > 1).sum())


def visible_texels(atlas: TextureAtlas, fragments) -> np.ndarray:
    'Flat indices of the texels sampled by the covered pixels of a frame.'
    flat, _, _, face = fragments.pixels()
    if len(flat) == 0:
        return np.zeros(0, dtype=np.int64)
    bary = fragments.barycentrics.reshape(-1, 3)[flat]
    uv = (bary[:, :, None] * atlas.uvs[face]).sum(1)
    q = atlas.resolution
    base = np.floor(uv * q - 0.5).astype(np.int64)
    texels = []
    for di in (0, 1):
        for dj in (0, 1):
            cols = np.clip(base[:, 0] + dj, 0, q - 1)
            rows = np.clip(base[:, 1] + di, 0, q - 1)
            texels.append(rows * q + cols)
    return np.unique(np.concatenate(texels))


class StaticTexture(nn.Module):
    'The directly optimized q x q x 3 map, initialized to mid-gray.'

    def __init__(self, resolution: int, init: float = 0.5):
        super().__init__()
        self.texels = nn.Parameter(torch.full((resolution, resolution, 3), init, dtype=torch.float64))

    def forward(self):
        return self.texels


class DynamicTextureNet(nn.Module):
    'Hash-encoded texel UV plus pose code to an RGB offset; starts at zero.'

    def __init__(self, config: dict, pose_dim: int, generator: torch.Generator = None):
        super().__init__()
        self.pose_dim = pose_dim
        self.encoder = Encoding.new(config.get('encoding', {}), 2, generator)
        self.mlp = FieldMLP(self.encoder.output_dim + pose_dim, 3,
                            hidden_dim=config.get('hidden_dim', 64),
                            n_hidden=config.get('n_hidden', 2),
                            generator=generator)

    def forward(self, uv, pose_code):
        code = as_tensor(pose_code, dtype=uv.dtype).reshape(1, -1).expand(uv.shape[0], self.pose_dim)
        out = self.mlp(torch.cat([self.encoder(uv), code], dim=1))
        if not torch.isfinite(out).all():
            raise NonFiniteError('non-finite activations in the dynamic texture network')
        return out


def texel_centers(resolution: int) -> torch.Tensor:
    'UVs of all texel centers, row-major, (q * q, 2).'
    c = (torch.arange(resolution, dtype=torch.float64) + 0.5) / resolution
    v, u = torch.meshgrid(c, c, indexing='ij')
    return torch.stack([u.reshape(-1), v.reshape(-1)], dim=1)


def eval_dynamic_texture(net: DynamicTextureNet, resolution: int, pose_code, texels=None) -> torch.Tensor:
    '''The dynamic map at texel centers, (q, q, 3). When `texels` (flat indices)
    is given only those are evaluated and all other texels are zero.'''
    uv = texel_centers(resolution)
    if texels is None:
        return net(uv, pose_code).reshape(resolution, resolution, 3)
    index = as_tensor(np.asarray(texels), dtype=torch.int64)
    out = torch.zeros(resolution * resolution, 3, dtype=torch.float64)
    out = out.index_put((index,), net(uv[index], pose_code))
    return out.reshape(resolution, resolution, 3)


def combine_texture(static, dynamic):
    if static.shape != dynamic.shape:
        raise ValueError(f'cannot combine texture maps of shapes {tuple(static.shape)} and {tuple(dynamic.shape)}')
    return static + dynamic


@dataclass
class PoseNoiseSchedule:
    sigma_start: float = 0.1
    span: int = 100  # epochs until the noise reaches 0

    def sigma(self, epoch: int) -> float:
        if self.span <= 0 or epoch >= self.span:
            return 0.0
        return self.sigma_start * (1 - epoch / self.span)


def anneal_pose_noise(pose_code, epoch: int, schedule: PoseNoiseSchedule,
                      generator: torch.Generator = None) -> torch.Tensor:
    code = as_tensor(pose_code, dtype=torch.float64)
    sigma = schedule.sigma(epoch)
    if sigma == 0:
        return code
    return code + sigma * torch.randn(code.shape, dtype=code.dtype, generator=generator)


def export_texture(texture, path_prefix):
    'Writes <prefix>.png (clamped to [0, 1]) and the exact float grid <prefix>.npy.'
    if isinstance(texture, torch.Tensor):
        texture = texture.detach().cpu().numpy()
    save_png(f'{path_prefix}.png', texture)
    save_grid(f'{path_prefix}.npy', texture)

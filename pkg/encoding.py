'Coordinate encoders and the small MLPs that consume them.'

import math

import torch
from torch import nn

from util import as_tensor, register


# Spatial hash primes (one per input dimension).
PRIMES = (1, 2654435761, 805459861)


class Encoding(nn.Module):
    'Maps points in [0, 1]^d to feature vectors.'

    subtypes: dict = {}

    @property
    def output_dim(self) -> int:
        raise NotImplementedError()

    @staticmethod
    def new(config: dict, input_dim: int, generator: torch.Generator = None):
        return Encoding.subtypes[config.get('type', 'HashGridEncoding')](config, input_dim, generator)


@register(Encoding)
class HashGridEncoding(Encoding):
    '''Multiresolution hash-grid encoding with d-linear interpolation.

    Level l has resolution floor(base_resolution * growth^l). Levels whose
    (resolution + 1)^d grid fits in the table are indexed densely, finer
    levels through the XOR-of-primes spatial hash. Inputs are clamped to
    [0, 1] before lookup.'''

    def __init__(self, config: dict, input_dim: int, generator: torch.Generator = None):
        super().__init__()
        self.input_dim = input_dim
        self.n_levels = config.get('n_levels', 8)
        self.features_per_level = config.get('features_per_level', 2)
        self.table_size = 2 ** config.get('log2_table_size', 14)
        self.base_resolution = config.get('base_resolution', 4)
        self.growth = config.get('growth', 1.5)
        init_scale = config.get('init_scale', 1e-4)

        self.resolutions = [int(math.floor(self.base_resolution * self.growth ** l))
                            for l in range(self.n_levels)]
        table = torch.rand(self.n_levels, self.table_size, self.features_per_level,
                           dtype=torch.float64, generator=generator)
        self.table = nn.Parameter((2 * table - 1) * init_scale)

        offsets = torch.tensor([[(c >> i) & 1 for i in range(input_dim)]
                                for c in range(2 ** input_dim)], dtype=torch.int64)
        self.register_buffer('corner_offsets', offsets)

    @property
    def output_dim(self) -> int:
        return self.n_levels * self.features_per_level

    def _index(self, corners: torch.Tensor, resolution: int) -> torch.Tensor:
        'Table index of integer grid corners (..., d).'
        if (resolution + 1) ** self.input_dim <= self.table_size:
            strides = torch.tensor([(resolution + 1) ** i for i in range(self.input_dim)],
                                   dtype=torch.int64, device=corners.device)
            return (corners * strides).sum(-1)
        h = torch.zeros(corners.shape[:-1], dtype=torch.int64, device=corners.device)
        for i in range(self.input_dim):
            h = h ^ (corners[..., i] * PRIMES[i])
        return h % self.table_size

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x.clamp(0.0, 1.0)
        features = []

        for level, resolution in enumerate(self.resolutions):
            scaled = x * resolution
            cell = scaled.detach().floor().clamp(max=resolution - 1).long()
            w = scaled - cell  # (B, d)
            corners = cell[:, None, :] + self.corner_offsets[None]  # (B, 2^d, d)
            weights = torch.where(self.corner_offsets[None].bool(),
                                  w[:, None, :], 1 - w[:, None, :]).prod(-1)  # (B, 2^d)
            values = self.table[level][self._index(corners, resolution)]  # (B, 2^d, F)
            features.append((weights[..., None] * values).sum(1))

        return torch.cat(features, dim=-1)


def hash_encode(encoder: Encoding, coords) -> torch.Tensor:
    'Features of (B, d) points; values outside [0, 1] are clamped.'
    coords = as_tensor(coords, dtype=torch.float64)
    if not torch.isfinite(coords).all():
        raise ValueError('hash_encode needs finite coordinates')
    return encoder(coords.reshape(-1, encoder.input_dim))


class FieldMLP(nn.Module):
    'Dense network with smooth activations and a zero-initialized output layer.'

    def __init__(self, input_dim: int, output_dim: int, hidden_dim: int = 64, n_hidden: int = 3,
                 generator: torch.Generator = None):
        super().__init__()
        dims = [input_dim] + [hidden_dim] * n_hidden
        self.hidden = nn.ModuleList([nn.Linear(a, b, dtype=torch.float64)
                                     for a, b in zip(dims[:-1], dims[1:])])
        self.output = nn.Linear(dims[-1], output_dim, dtype=torch.float64)

        with torch.no_grad():
            for layer in self.hidden:
                bound = 1 / math.sqrt(layer.in_features)
                layer.weight.copy_((2 * torch.rand(layer.weight.shape, dtype=torch.float64,
                                                   generator=generator) - 1) * bound)
                layer.bias.zero_()
            self.output.weight.zero_()
            self.output.bias.zero_()

    def forward(self, x):
        for layer in self.hidden:
            x = nn.functional.silu(layer(x))
        return self.output(x)

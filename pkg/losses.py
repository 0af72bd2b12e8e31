'''Scalar objectives of the geometry and appearance stages.

Images are torch tensors of shape (H, W) or (H, W, C); masks are (H, W).'''

from dataclasses import dataclass
import logging

import numpy as np
import torch
from torch.nn import functional as F
from torchmetrics.functional import structural_similarity_index_measure

from util import ConfigError, as_tensor


@dataclass
class LossWeights:
    render: float = 1.0    # diffuse (or normal) rendering term
    mask: float = 0.5
    reg: float = 0.01      # Jacobian regularizer
    depth: float = 0.1     # depth ranking
    color: float = 0.8     # masked L1 on color
    ssim: float = 0.2      # color SSIM term
    huber_delta: float = 0.1
    ssim_window: int = 11
    depth_margin: float = 1e-4  # relative to the scene bounding-box diagonal
    depth_pairs: int = 1024
    supervision: str = 'diffuse'  # or 'normals'

    def __post_init__(self):
        for name in ('render', 'mask', 'reg', 'depth', 'color', 'ssim', 'huber_delta', 'depth_margin'):
            if getattr(self, name) < 0:
                raise ConfigError(f'loss.{name} must be nonnegative')
        if self.ssim_window < 1 or self.ssim_window % 2 == 0:
            raise ConfigError('loss.ssim_window must be a positive odd integer')
        if self.depth_pairs < 0:
            raise ConfigError('loss.depth_pairs must be nonnegative')
        if self.supervision not in ('diffuse', 'normals'):
            raise ConfigError(f'loss.supervision must be "diffuse" or "normals", got {self.supervision!r}')


def _check_shapes(a, b, what):
    if a.shape != b.shape:
        raise ValueError(f'{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}')


def _expand_mask(mask, image):
    return mask[..., None] if image.dim() == mask.dim() + 1 else mask


def _as_batch(image):
    'HW or HWC to 1CHW.'
    return image[None, None] if image.dim() == 2 else image.permute(2, 0, 1)[None]


def ssim(x, y, window: int = 11) -> torch.Tensor:
    'Mean SSIM with a Gaussian window (sigma 1.5) and unit data range.'
    _check_shapes(x, y, 'ssim')
    return structural_similarity_index_measure(_as_batch(x), _as_batch(y), gaussian_kernel=True,
                                               sigma=1.5, kernel_size=window, data_range=1.0)


def l_diffuse(pred, gt, mask, weights: LossWeights = LossWeights()) -> torch.Tensor:
    'Huber plus SSIM dissimilarity between the masked prediction and the target.'
    _check_shapes(pred, gt, 'l_diffuse')
    mask = as_tensor(mask, dtype=pred.dtype)
    masked = _expand_mask(mask, pred) * pred
    huber = F.huber_loss(masked, gt, delta=weights.huber_delta)
    return huber + (1 - ssim(masked, gt, weights.ssim_window))


def l_normal(pred, gt, mask) -> torch.Tensor:
    'Masked mean L1 between (H, W, 3) normal maps.'
    _check_shapes(pred, gt, 'l_normal')
    mask = as_tensor(mask, dtype=pred.dtype)
    covered = mask.sum() * pred.shape[-1]
    if covered == 0:
        return pred.sum() * 0
    return (mask[..., None] * (pred - gt).abs()).sum() / covered


def l_reg(jacobians) -> torch.Tensor:
    'Sum over faces of the squared Frobenius distance to the identity.'
    identity = torch.eye(3, dtype=jacobians.dtype)
    return ((jacobians - identity) ** 2).sum()


def sample_depth_pairs(depth_gt, mask, n_pairs: int, rng: np.random.Generator):
    '''Random pixel pairs (flat indices a, b) among covered pixels with valid
    depth, ordered so that depth_gt[a] < depth_gt[b]. Ties are dropped.'''
    depth = np.asarray(depth_gt).reshape(-1)
    valid = np.flatnonzero((np.asarray(mask).reshape(-1) > 0.5) & (depth >= 0))
    if len(valid) < 2 or n_pairs == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    a = valid[rng.integers(len(valid), size=n_pairs)]
    b = valid[rng.integers(len(valid), size=n_pairs)]
    keep = depth[a] != depth[b]
    a, b = a[keep], b[keep]
    swap = depth[a] > depth[b]
    a[swap], b[swap] = b[swap], a[swap].copy()
    return a, b


def l_depth(depth_pred, pairs, margin: float) -> torch.Tensor:
    '''Mean hinge max(0, z(a) - z(b) + margin) over pairs where the ground
    truth places a in front of b. No pairs gives 0 and a logged warning.'''
    a, b = (as_tensor(np.asarray(p), dtype=torch.int64) for p in pairs)
    if len(a) == 0:
        logging.warning('l_depth: no valid depth pairs, depth ranking term is 0')
        return depth_pred.sum() * 0
    z = depth_pred.reshape(-1)
    return torch.relu(z[a] - z[b] + margin).mean()


def l_mask(mask_pred, mask_gt) -> torch.Tensor:
    mask_gt = as_tensor(mask_gt, dtype=mask_pred.dtype)
    _check_shapes(mask_pred, mask_gt, 'l_mask')
    return F.mse_loss(mask_pred, mask_gt)


def l_geo(components: dict, weights: LossWeights):
    '''Weighted sum of the geometry terms 'render', 'mask', 'reg' and 'depth'.
    Returns (total, per-term weighted contributions as floats).'''
    total = 0.0
    contributions = {}
    for name in ('render', 'mask', 'reg', 'depth'):
        if name not in components:
            continue
        term = getattr(weights, name) * components[name]
        contributions[name] = term.item()
        total = total + term
    return total, contributions


def l_tex(pred, gt, mask, weights: LossWeights = LossWeights()) -> torch.Tensor:
    '''color * masked mean L1 + ssim * (1 - SSIM) of (H, W, 3) color images.
    SSIM compares the masked prediction with the unmasked target.'''
    _check_shapes(pred, gt, 'l_tex')
    mask = _expand_mask(as_tensor(mask, dtype=pred.dtype), pred)
    covered = mask.sum() * (pred.shape[-1] if pred.dim() == 3 else 1)
    l1 = (mask * (pred - gt).abs()).sum() / covered if covered > 0 else pred.sum() * 0
    return weights.color * l1 + weights.ssim * (1 - ssim(mask * pred, gt, weights.ssim_window))

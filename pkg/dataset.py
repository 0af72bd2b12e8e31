'''Frame observations, the dataset directory layout and the synthetic garment
sequence used for end-to-end checks.

Directory layout:
    template.obj              canonical garment template (optionally with UVs)
    body.obj                  optional body mesh carrying the skinning weights
    rig.txt                   skeleton, plus the body (or template) weight block
    poses.txt                 one pose vector per frame
    camera.txt                one camera per frame, or a single shared camera
    frames/NNNN.diffuse.npy   diffuse image (or .png)
    frames/NNNN.depth.npy     depth, -1 where empty
    frames/NNNN.mask.png      garment mask (or .npy)
    frames/NNNN.color.png     color image (or .npy)
    frames/NNNN.normals.npy   optional camera-space normal map
    gt/NNNN.obj, gt/band.npy, gt/texture.npy   synthetic ground truth only
'''

from dataclasses import dataclass, field
import logging
import math
import os

import numpy as np
import torch
from tqdm import tqdm

import util
from mesh import Mesh, read_obj, write_obj
from render import (Camera, rasterize, shade_diffuse, render_depth, render_normals,
                    render_textured, read_cameras, write_cameras, save_png, load_png,
                    save_grid, load_grid)
from skinning import (Skeleton, SkinWeights, derive_weights, skin, read_rig, write_rig,
                      read_poses, write_poses)
from util import ConfigError, as_tensor


@dataclass
class FrameObservation:
    index: int
    diffuse: np.ndarray  # (H, W)
    depth: np.ndarray  # (H, W), -1 where empty
    mask: np.ndarray  # (H, W) in [0, 1]
    color: np.ndarray  # (H, W, 3)
    camera: Camera
    pose: np.ndarray
    normals: np.ndarray = None  # (H, W, 3), optional

    def __post_init__(self):
        shape = self.camera.resolution
        for name in ('diffuse', 'depth', 'mask'):
            if getattr(self, name).shape != shape:
                raise ValueError(f'frame {self.index}: {name} image is {getattr(self, name).shape}, '
                                 f'camera resolution is {shape}')
        if self.color.shape != shape + (3,):
            raise ValueError(f'frame {self.index}: color image is {self.color.shape}, expected {shape + (3,)}')
        if self.normals is not None and self.normals.shape != shape + (3,):
            raise ValueError(f'frame {self.index}: normal map is {self.normals.shape}, expected {shape + (3,)}')
        if self.mask.min() < 0 or self.mask.max() > 1:
            raise ValueError(f'frame {self.index}: mask values must lie in [0, 1]')


@dataclass
class GarmentDataset:
    template: Mesh
    skeleton: Skeleton
    weights: SkinWeights
    frames: list
    body: Mesh = None
    body_weights: np.ndarray = None
    gt_meshes: list = None
    band: np.ndarray = None  # per-vertex wrinkle band of the ground-truth topology
    gt_texture: np.ndarray = None

    @property
    def poses(self) -> np.ndarray:
        return np.stack([f.pose for f in self.frames])

    def __len__(self):
        return len(self.frames)


def _load_channel(stem, channels):
    if os.path.exists(stem + '.npy'):
        return load_grid(stem + '.npy')
    if os.path.exists(stem + '.png'):
        return load_png(stem + '.png', channels)
    return None


def load_dataset(directory) -> GarmentDataset:
    template = read_obj(os.path.join(directory, 'template.obj'))
    skeleton, rig_weights = read_rig(os.path.join(directory, 'rig.txt'))
    poses = read_poses(os.path.join(directory, 'poses.txt'))
    cameras = read_cameras(os.path.join(directory, 'camera.txt'))

    body, body_weights = None, None
    body_path = os.path.join(directory, 'body.obj')
    if os.path.exists(body_path):
        body, body_weights = read_obj(body_path), rig_weights
        weights = derive_weights(template, body, body_weights)
    elif rig_weights is not None:
        weights = SkinWeights(rig_weights)
    else:
        raise ValueError(f'{directory}: rig.txt has no weights and there is no body.obj')

    if len(cameras) not in (1, len(poses)):
        raise ValueError(f'{directory}: {len(cameras)} cameras for {len(poses)} frames')

    frames = []
    for t, pose in enumerate(poses):
        stem = os.path.join(directory, 'frames', f'{t:04d}')
        channels = {name: _load_channel(f'{stem}.{name}', c)
                    for name, c in (('diffuse', 1), ('depth', 1), ('mask', 1), ('color', 3), ('normals', 3))}
        missing = [name for name in ('diffuse', 'depth', 'mask', 'color') if channels[name] is None]
        if missing:
            raise FileNotFoundError(f'{stem}: missing channels {missing}')
        frames.append(FrameObservation(index=t, camera=cameras[t if len(cameras) > 1 else 0],
                                       pose=pose, **channels))

    gt_meshes, band, gt_texture = None, None, None
    gt_dir = os.path.join(directory, 'gt')
    if os.path.isdir(gt_dir):
        gt_meshes = [read_obj(os.path.join(gt_dir, f'{t:04d}.obj')) for t in range(len(frames))]
        if os.path.exists(os.path.join(gt_dir, 'band.npy')):
            band = np.load(os.path.join(gt_dir, 'band.npy'))
        if os.path.exists(os.path.join(gt_dir, 'texture.npy')):
            gt_texture = np.load(os.path.join(gt_dir, 'texture.npy'))

    logging.info(f'Loaded {len(frames)} frames from {directory}')
    return GarmentDataset(template, skeleton, weights, frames, body, body_weights,
                          gt_meshes, band, gt_texture)


def save_dataset(dataset: GarmentDataset, directory):
    os.makedirs(os.path.join(directory, 'frames'), exist_ok=True)
    write_obj(os.path.join(directory, 'template.obj'), dataset.template)
    if dataset.body is not None:
        write_obj(os.path.join(directory, 'body.obj'), dataset.body)
        write_rig(os.path.join(directory, 'rig.txt'), dataset.skeleton, dataset.body_weights)
    else:
        write_rig(os.path.join(directory, 'rig.txt'), dataset.skeleton, dataset.weights.W)
    write_poses(os.path.join(directory, 'poses.txt'), dataset.poses)

    cameras = [f.camera for f in dataset.frames]
    shared = all(c is cameras[0] for c in cameras[1:])
    write_cameras(os.path.join(directory, 'camera.txt'), cameras[:1] if shared else cameras)

    for frame in dataset.frames:
        stem = os.path.join(directory, 'frames', f'{frame.index:04d}')
        save_grid(f'{stem}.diffuse.npy', frame.diffuse)
        save_grid(f'{stem}.depth.npy', frame.depth)
        save_png(f'{stem}.mask.png', frame.mask)
        save_grid(f'{stem}.color.npy', frame.color)
        save_png(f'{stem}.color.png', frame.color)
        if frame.normals is not None:
            save_grid(f'{stem}.normals.npy', frame.normals)

    if dataset.gt_meshes is not None:
        os.makedirs(os.path.join(directory, 'gt'), exist_ok=True)
        for t, m in enumerate(dataset.gt_meshes):
            write_obj(os.path.join(directory, 'gt', f'{t:04d}.obj'), m)
        if dataset.band is not None:
            np.save(os.path.join(directory, 'gt', 'band.npy'), dataset.band)
        if dataset.gt_texture is not None:
            np.save(os.path.join(directory, 'gt', 'texture.npy'), dataset.gt_texture)
    print(util.now(), f'Wrote {len(dataset)} frames to {directory}')


@dataclass
class SyntheticConfig:
    n_frames: int = 20
    resolution: int = 256
    n_bones: int = 2
    rings: int = 16
    segments: int = 24
    radius: float = 0.3
    flare: float = 0.3  # relative radius increase from top to hem
    length: float = 1.0
    body_scale: float = 0.8
    wrinkle_amplitude: float = 0.04
    wrinkle_frequency: int = 8
    band: tuple = (0.35, 0.6)  # wrinkle band, as fractions of the length below the waist
    max_angle: float = 0.4
    turn: float = math.pi  # root rotation about the vertical axis over the whole sequence
    texture_resolution: int = 64
    checker_cells: int = 8
    camera_distance: float = 3.0
    template_scale: float = 0.9  # radius of the template relative to the ground-truth garment
    detail: int = 1  # ground-truth tessellation, as a multiple of rings and segments

    def __post_init__(self):
        self.band = tuple(self.band)
        if self.n_frames < 1 or self.n_bones not in (2, 3):
            raise ConfigError('synthetic.n_frames must be >= 1 and synthetic.n_bones 2 or 3')
        if not 0 <= self.band[0] < self.band[1] <= 1:
            raise ConfigError('synthetic.band must be an increasing pair inside [0, 1]')
        if self.template_scale <= 0 or self.detail < 1:
            raise ConfigError('synthetic.template_scale must be positive and synthetic.detail >= 1')


def tube_mesh(config: SyntheticConfig, scale: float = 1.0, detail: int = 1) -> Mesh:
    '''Open, flared tube hanging down from the waist at y = 0, with
    cylindrical per-corner UVs.'''
    rings, segments = config.rings * detail, config.segments * detail
    i, k = np.meshgrid(np.arange(rings + 1), np.arange(segments), indexing='ij')
    t = i / rings
    theta = 2 * np.pi * k / segments
    radius = scale * config.radius * (1 + config.flare * t)
    vertices = np.stack([radius * np.cos(theta), -config.length * t, radius * np.sin(theta)], axis=-1)

    faces, uvs = [], []
    for r in range(rings):
        for s in range(segments):
            a, b = r * segments + s, r * segments + (s + 1) % segments
            c, d = a + segments, b + segments
            u0, u1 = s / segments, (s + 1) / segments
            v0, v1 = r / rings, (r + 1) / rings
            faces.extend([[a, b, c], [b, d, c]])
            uvs.extend([[[u0, v0], [u1, v0], [u0, v1]], [[u1, v0], [u1, v1], [u0, v1]]])
    return Mesh(vertices.reshape(-1, 3), faces, uvs)


def tube_skeleton(config: SyntheticConfig) -> Skeleton:
    'A chain of bones down the tube axis.'
    rest = np.tile(np.eye(4), (config.n_bones, 1, 1))
    rest[:, 1, 3] = -config.length * np.arange(config.n_bones) / config.n_bones
    return Skeleton(rest, np.arange(config.n_bones) - 1)


def chain_weights(vertices, config: SyntheticConfig) -> np.ndarray:
    'Piecewise linear blend between consecutive joints along the chain.'
    depth = np.clip(-vertices[:, 1] / config.length * config.n_bones, 0, config.n_bones - 1)
    lower = np.minimum(np.floor(depth).astype(np.int64), config.n_bones - 2)
    frac = depth - lower
    W = np.zeros((len(vertices), config.n_bones))
    W[np.arange(len(vertices)), lower] = 1 - frac
    W[np.arange(len(vertices)), lower + 1] += frac
    return W


def wrinkle_band_mask(mesh: Mesh, band, length: float = 1.0) -> np.ndarray:
    'Vertices whose canonical height lies inside the wrinkle band.'
    t = -mesh.vertices[:, 1] / length
    return (t >= band[0]) & (t <= band[1])


def wrinkle_displacement(template: Mesh, config: SyntheticConfig, strength: float, phase: float) -> np.ndarray:
    'Radial folds confined to the band, with a smooth envelope along the tube.'
    p = template.vertices
    t = -p[:, 1] / config.length
    lo, hi = config.band
    envelope = np.where((t >= lo) & (t <= hi), np.sin(np.pi * (t - lo) / (hi - lo)) ** 2, 0.0)
    theta = np.arctan2(p[:, 2], p[:, 0])
    radial = np.stack([np.cos(theta), np.zeros_like(theta), np.sin(theta)], axis=1)
    amount = config.wrinkle_amplitude * strength * envelope * np.sin(config.wrinkle_frequency * theta + phase)
    return amount[:, None] * radial


def checker_texture(config: SyntheticConfig) -> np.ndarray:
    q, cells = config.texture_resolution, config.checker_cells
    i, j = np.meshgrid(np.arange(q), np.arange(q), indexing='ij')
    parity = ((i * cells // q) + (j * cells // q)) % 2
    light, dark = np.array([0.85, 0.75, 0.3]), np.array([0.2, 0.3, 0.6])
    return np.where(parity[..., None] == 1, light, dark)


def render_observation(index, positions, mesh: Mesh, camera: Camera, texture, pose) -> FrameObservation:
    'Renders every supervision channel of a posed mesh.'
    positions = as_tensor(positions, dtype=torch.float64)
    fragments = rasterize(positions, mesh.faces, camera)
    with torch.no_grad():
        diffuse = shade_diffuse(fragments, positions, mesh.faces, camera).numpy()
        depth = render_depth(fragments, positions, mesh.faces, camera).numpy()
        normals = render_normals(fragments, positions, mesh.faces, camera).numpy()
        color = render_textured(fragments, positions, mesh.faces, mesh.uvs,
                                as_tensor(texture), camera).numpy()
    return FrameObservation(index=index, diffuse=diffuse, depth=depth,
                            mask=fragments.covered.astype(np.float64), color=color,
                            camera=camera, pose=np.asarray(pose, dtype=np.float64), normals=normals)


def generate_synthetic(config: SyntheticConfig, seed: int) -> GarmentDataset:
    '''A skirt-like tube on a 2-3 bone chain. Frame t applies a known band of
    radial wrinkles and a bone pose to the ground-truth garment, and turns
    it about the vertical axis so that the fixed camera sees every side over
    the sequence; frame 0 is its undeformed rest pose. The template handed to reconstruction is the
    same tube with its radius scaled by template_scale, and the ground truth
    is tessellated `detail` times finer.'''
    rng = util.numpy_rng(seed)
    template = tube_mesh(config, scale=config.template_scale)
    truth = tube_mesh(config, detail=config.detail)
    body = tube_mesh(config, scale=config.body_scale)
    skeleton = tube_skeleton(config)
    body_weights = chain_weights(body.vertices, config)
    weights = derive_weights(template, body, body_weights)
    truth_weights = derive_weights(truth, body, body_weights)

    center = np.array([0.0, -0.5 * config.length, 0.0])
    camera = Camera.look_at(center + np.array([0.0, 0.2, config.camera_distance]), center,
                            width=config.resolution, height=config.resolution)
    texture = checker_texture(config)

    phases = rng.uniform(0, 2 * np.pi, size=(3, skeleton.n_bones))
    frames, gt_meshes = [], []
    for t in tqdm(range(config.n_frames), desc='synthetic frames'):
        s = t / max(config.n_frames - 1, 1)
        pose = skeleton.rest_pose()
        if t > 0:
            for b in range(skeleton.n_bones):
                swing = config.max_angle * math.sin(2 * np.pi * s + phases[0, b])
                pose[3 + 3 * b:6 + 3 * b] = [swing * math.cos(phases[1, b]), 0.0, swing * math.sin(phases[1, b])]
            pose[:3] = [0.0, config.turn * s + 0.02 * math.sin(2 * np.pi * s + phases[2, 0]), 0.0]
        strength = 0.0 if t == 0 else 0.5 + 0.5 * math.sin(2 * np.pi * s + phases[2, 0]) ** 2
        canonical = truth.vertices + wrinkle_displacement(truth, config, strength, phases[2, -1] + 3 * s)
        posed = skin(canonical, skeleton, pose, truth_weights).numpy()

        gt_meshes.append(Mesh(posed, truth.faces))
        frames.append(render_observation(t, posed, truth, camera, texture, pose))

    return GarmentDataset(template, skeleton, weights, frames, body, body_weights, gt_meshes,
                          wrinkle_band_mask(truth, config.band, config.length), texture)

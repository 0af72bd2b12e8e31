'''A small differentiable rasterizer.

Coverage (which face is visible at which pixel) is computed without
gradients. Everything evaluated on top of it (surface points, depth,
shading, normals, texture lookups) is recomputed with torch from the vertex
positions, so gradients are exact at fixed coverage. The silhouette channel
uses a signed distance to screen-space contour edges to also provide
gradients across the coverage boundary.

Camera space follows the pinhole convention: x right, y down, z forward;
pixel (i, j) is sampled at its center (j + 0.5, i + 0.5).'''

from dataclasses import dataclass
import logging

import numpy as np
import torch
from torch.nn import functional as F
import matplotlib
matplotlib.use('Agg')
from matplotlib import pyplot as plt

from mesh import Mesh
from util import as_tensor


NEAR_PLANE = 0.01
EMPTY_DEPTH = -1.0


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray  # world to camera, (3, 3)
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f'focal lengths must be positive, got fx={self.fx}, fy={self.fy}')
        if np.abs(self.rotation @ self.rotation.T - np.eye(3)).max() > 1e-9:
            raise ValueError('camera rotation is not orthonormal')

    @staticmethod
    def look_at(eye, target, up=(0.0, 1.0, 0.0), focal=None, width=256, height=256) -> 'Camera':
        eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
        forward = target - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, up)
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        focal = focal or 1.2 * max(width, height)
        return Camera(focal, focal, width / 2, height / 2, width, height, R, -R @ eye)

    @property
    def resolution(self):
        return (self.height, self.width)

    @property
    def center(self) -> np.ndarray:
        'Camera position in world coordinates.'
        return -self.rotation.T @ self.translation

    def to_camera(self, points):
        if isinstance(points, torch.Tensor):
            R = as_tensor(self.rotation, dtype=points.dtype)
            t = as_tensor(self.translation, dtype=points.dtype)
            return points @ R.T + t
        return np.asarray(points) @ self.rotation.T + self.translation

    def rotate_to_camera(self, vectors: torch.Tensor) -> torch.Tensor:
        return vectors @ as_tensor(self.rotation, dtype=vectors.dtype).T

    def pixel_rays(self, rows, cols):
        'Unnormalized ray directions (z = 1) through the given pixel centers.'
        return np.stack([(cols + 0.5 - self.cx) / self.fx,
                         (rows + 0.5 - self.cy) / self.fy,
                         np.ones(len(rows))], axis=1)


def project(points_camera, camera: Camera):
    'Pixel coordinates (u, v) and depth of camera-space points.'
    z = points_camera[..., 2]
    u = camera.fx * points_camera[..., 0] / z + camera.cx
    v = camera.fy * points_camera[..., 1] / z + camera.cy
    if isinstance(points_camera, torch.Tensor):
        return torch.stack([u, v], dim=-1), z
    return np.stack([u, v], axis=-1), z


def orbit_cameras(camera: Camera, center, n: int) -> list[Camera]:
    'Copies of the camera rotated about the vertical axis through `center`.'
    center = np.asarray(center, dtype=np.float64)
    cameras = []
    for k in range(n):
        phi = 2 * np.pi * k / n
        c, s = np.cos(phi), np.sin(phi)
        spin = np.array([[c, 0, -s], [0, 1, 0], [s, 0, c]])
        R = camera.rotation @ spin
        t = camera.rotation @ (center - spin @ center) + camera.translation
        cameras.append(Camera(camera.fx, camera.fy, camera.cx, camera.cy,
                              camera.width, camera.height, R, t))
    return cameras


@dataclass
class FragmentBuffer:
    face_id: np.ndarray  # (H, W), -1 where empty
    barycentrics: np.ndarray  # (H, W, 3), perspective-correct
    depth: np.ndarray  # (H, W), camera-space z, EMPTY_DEPTH where empty

    @property
    def covered(self) -> np.ndarray:
        return self.face_id >= 0

    @property
    def resolution(self):
        return self.face_id.shape

    def pixels(self):
        'Flat indices, rows, columns and faces of the covered pixels.'
        flat = np.flatnonzero(self.face_id.reshape(-1) >= 0)
        rows, cols = np.divmod(flat, self.face_id.shape[1])
        return flat, rows, cols, self.face_id.reshape(-1)[flat]


def rasterize(positions, faces, camera: Camera) -> FragmentBuffer:
    '''Z-buffered rasterization of a triangle list. On equal depth the lower
    face id wins. Faces with a corner in front of the near plane are skipped.'''
    if isinstance(positions, torch.Tensor):
        positions = positions.detach().cpu().numpy()
    faces = np.asarray(faces, dtype=np.int64)
    H, W = camera.height, camera.width

    p_cam = camera.to_camera(np.asarray(positions, dtype=np.float64))
    uv, z = project(p_cam, camera)
    corners_uv, corners_z = uv[faces], z[faces]

    with np.errstate(divide='ignore', invalid='ignore'):
        area2 = _cross2(corners_uv[:, 1] - corners_uv[:, 0], corners_uv[:, 2] - corners_uv[:, 0])
    visible = (corners_z > NEAR_PLANE).all(axis=1) & (np.abs(area2) > 1e-12)
    visible &= np.isfinite(corners_uv).all(axis=(1, 2))

    face_id = np.full((H, W), -1, dtype=np.int64)
    barycentrics = np.zeros((H, W, 3))
    depth = np.full((H, W), EMPTY_DEPTH)

    candidates = np.flatnonzero(visible)
    if len(candidates) == 0:
        return FragmentBuffer(face_id, barycentrics, depth)

    # Pixel-center bounding boxes, clipped to the image.
    lo = np.ceil(corners_uv[candidates].min(axis=1) - 0.5)
    hi = np.floor(corners_uv[candidates].max(axis=1) - 0.5)
    lo = np.maximum(lo, 0).astype(np.int64)
    hi = np.minimum(hi, [W - 1, H - 1]).astype(np.int64)
    widths = np.maximum(hi[:, 0] - lo[:, 0] + 1, 0)
    heights = np.maximum(hi[:, 1] - lo[:, 1] + 1, 0)
    counts = widths * heights

    pair_face = np.repeat(np.arange(len(candidates)), counts)
    offsets = np.repeat(np.cumsum(counts) - counts, counts)
    local = np.arange(counts.sum()) - offsets
    cols = lo[pair_face, 0] + local % widths[pair_face]
    rows = lo[pair_face, 1] + local // widths[pair_face]

    f = candidates[pair_face]
    p = np.stack([cols + 0.5, rows + 0.5], axis=1)
    a, b, c = corners_uv[f, 0], corners_uv[f, 1], corners_uv[f, 2]
    lam = np.stack([_cross2(b - p, c - p), _cross2(c - p, a - p), _cross2(a - p, b - p)], axis=1)
    lam /= area2[f][:, None]
    inside = (lam >= 0).all(axis=1)

    f, rows, cols, lam = f[inside], rows[inside], cols[inside], lam[inside]
    inv_z = (lam / corners_z[f]).sum(axis=1)
    z_pixel = 1.0 / inv_z
    front = z_pixel > NEAR_PLANE
    f, rows, cols, lam, z_pixel = f[front], rows[front], cols[front], lam[front], z_pixel[front]

    pixel = rows * W + cols
    order = np.lexsort((f, z_pixel, pixel))
    pixel_sorted = pixel[order]
    _, first = np.unique(pixel_sorted, return_index=True)
    winners = order[first]

    flat_ids = face_id.reshape(-1)
    flat_ids[pixel[winners]] = f[winners]
    bary = lam[winners] / corners_z[f[winners]] * z_pixel[winners, None]
    barycentrics.reshape(-1, 3)[pixel[winners]] = bary
    depth.reshape(-1)[pixel[winners]] = z_pixel[winners]

    return FragmentBuffer(face_id, barycentrics, depth)


def _cross2(a, b):
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def vertex_normals(positions: torch.Tensor, faces) -> torch.Tensor:
    'Area-weighted average of face normals, renormalized.'
    f = as_tensor(np.asarray(faces), dtype=torch.int64)
    v0, v1, v2 = positions[f[:, 0]], positions[f[:, 1]], positions[f[:, 2]]
    weighted = torch.linalg.cross(v1 - v0, v2 - v0)
    normals = torch.zeros_like(positions)
    for k in range(3):
        normals = normals.index_add(0, f[:, k], weighted)
    return F.normalize(normals, dim=1, eps=1e-300)


def surface_points(fragments: FragmentBuffer, positions_camera: torch.Tensor, faces, camera: Camera):
    '''Ray/triangle intersections at the covered pixels, differentiable in the
    camera-space positions. Returns (flat pixel indices, faces, points (P, 3),
    barycentrics (P, 3)).'''
    flat, rows, cols, face = fragments.pixels()
    f = as_tensor(np.asarray(faces)[face], dtype=torch.int64)
    rays = as_tensor(camera.pixel_rays(rows, cols), dtype=positions_camera.dtype)

    x0, x1, x2 = positions_camera[f[:, 0]], positions_camera[f[:, 1]], positions_camera[f[:, 2]]
    n = torch.linalg.cross(x1 - x0, x2 - x0)
    t = (n * x0).sum(1) / (n * rays).sum(1)
    points = t[:, None] * rays

    nn2 = (n * n).sum(1)
    b0 = (torch.linalg.cross(x1 - points, x2 - points) * n).sum(1) / nn2
    b1 = (torch.linalg.cross(x2 - points, x0 - points) * n).sum(1) / nn2
    bary = torch.stack([b0, b1, 1 - b0 - b1], dim=1)
    return flat, face, points, bary


def _scatter(flat, values, H, W, background=0.0):
    channels = values.shape[1:]
    image = torch.full((H * W,) + channels, background, dtype=values.dtype)
    image = image.index_put((as_tensor(flat),), values)
    return image.reshape((H, W) + channels)


def _interpolate(attributes, faces, face, bary):
    'Barycentric interpolation of per-vertex attributes (N, C) at the given faces.'
    f = as_tensor(np.asarray(faces)[face], dtype=torch.int64)
    return (bary[:, :, None] * attributes[f]).sum(1)


def shade_diffuse(fragments: FragmentBuffer, positions, faces, camera: Camera, normals=None) -> torch.Tensor:
    '''Diffuse image max(0, n . v) with n the interpolated smooth vertex normal
    and v the unit direction from the surface point to the camera.'''
    H, W = fragments.resolution
    positions = as_tensor(positions, dtype=torch.float64)
    if normals is None:
        normals = vertex_normals(positions, faces)
    flat, face, points, bary = surface_points(fragments, camera.to_camera(positions), faces, camera)
    n = F.normalize(_interpolate(camera.rotate_to_camera(normals), faces, face, bary), dim=1, eps=1e-300)
    view = -F.normalize(points, dim=1)
    return _scatter(flat, (n * view).sum(1).clamp(min=0.0), H, W)


def render_depth(fragments: FragmentBuffer, positions, faces, camera: Camera) -> torch.Tensor:
    'Camera-space depth of the front fragment; EMPTY_DEPTH on empty pixels.'
    H, W = fragments.resolution
    positions = as_tensor(positions, dtype=torch.float64)
    flat, _, points, _ = surface_points(fragments, camera.to_camera(positions), faces, camera)
    return _scatter(flat, points[:, 2], H, W, background=EMPTY_DEPTH)


def render_normals(fragments: FragmentBuffer, positions, faces, camera: Camera, normals=None) -> torch.Tensor:
    'Camera-space unit normal map, zero on empty pixels.'
    H, W = fragments.resolution
    positions = as_tensor(positions, dtype=torch.float64)
    if normals is None:
        normals = vertex_normals(positions, faces)
    flat, face, _, bary = surface_points(fragments, camera.to_camera(positions), faces, camera)
    n = F.normalize(_interpolate(camera.rotate_to_camera(normals), faces, face, bary), dim=1, eps=1e-300)
    return _scatter(flat, n, H, W)


def sample_texture(texture: torch.Tensor, uv: torch.Tensor) -> torch.Tensor:
    '''Bilinear lookup in a (q, q, C) map; texel (i, j) is centered at
    ((j + 0.5) / q, (i + 0.5) / q). Coordinates outside clamp to the border.'''
    grid = (2 * uv - 1).reshape(1, 1, -1, 2).to(texture.dtype)
    sampled = F.grid_sample(texture.permute(2, 0, 1)[None], grid, mode='bilinear',
                            padding_mode='border', align_corners=False)
    return sampled[0, :, 0].T


def render_textured(fragments: FragmentBuffer, positions, faces, uvs, texture: torch.Tensor,
                    camera: Camera) -> torch.Tensor:
    'Color image from per-corner UVs (M, 3, 2); sampled colors are clamped to [0, 1].'
    H, W = fragments.resolution
    positions = as_tensor(positions, dtype=torch.float64)
    flat, face, _, bary = surface_points(fragments, camera.to_camera(positions), faces, camera)
    corner_uvs = as_tensor(uvs, dtype=texture.dtype)[as_tensor(face)]
    uv = (bary[:, :, None].to(texture.dtype) * corner_uvs).sum(1)
    colors = sample_texture(texture, uv).clamp(0.0, 1.0)
    return _scatter(flat, colors, H, W)


def silhouette_edges(mesh: Mesh, positions, camera: Camera, fragments: FragmentBuffer) -> np.ndarray:
    '''Edges (pairs of vertex indices) on the screen-space contour that touch
    the border of the covered region. Contour edges are boundary edges and
    edges between a front- and a back-facing face.'''
    if isinstance(positions, torch.Tensor):
        positions = positions.detach().cpu().numpy()
    uv, z = project(camera.to_camera(positions), camera)
    f = mesh.faces
    with np.errstate(divide='ignore', invalid='ignore'):
        facing = np.sign(_cross2(uv[f[:, 1]] - uv[f[:, 0]], uv[f[:, 2]] - uv[f[:, 0]]))

    edge_faces = np.full((len(mesh.edges), 2), -1)
    face_of_slot = np.repeat(np.arange(mesh.n_faces), 3)
    slots = mesh.face_edges.reshape(-1)
    order = np.argsort(slots, kind='stable')
    slots, face_of_slot = slots[order], face_of_slot[order]
    first = np.r_[True, slots[1:] != slots[:-1]]
    edge_faces[slots[first], 0] = face_of_slot[first]
    edge_faces[slots[~first], 1] = face_of_slot[~first]

    boundary = edge_faces[:, 1] < 0
    flips = ~boundary & (facing[edge_faces[:, 0]] != facing[np.maximum(edge_faces[:, 1], 0)])
    edges = mesh.edges[(boundary | flips) & (z[mesh.edges] > NEAR_PLANE).all(axis=1)]
    if len(edges) == 0:
        return edges

    # Keep contour edges touching an uncovered pixel (or the image border).
    H, W = fragments.resolution
    padded = np.pad(fragments.covered, 1, constant_values=False)
    samples = np.stack([uv[edges[:, 0]], 0.5 * (uv[edges[:, 0]] + uv[edges[:, 1]]), uv[edges[:, 1]]], axis=1)
    near_border = np.zeros(len(edges), dtype=bool)
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            cols = np.clip(np.floor(samples[..., 0]).astype(np.int64) + dj, -1, W) + 1
            rows = np.clip(np.floor(samples[..., 1]).astype(np.int64) + di, -1, H) + 1
            near_border |= (~padded[rows, cols]).any(axis=1)
    return edges[near_border]


def soft_mask(fragments: FragmentBuffer, mesh: Mesh, positions, camera: Camera, sigma: float,
              chunk_size: int = 8192) -> torch.Tensor:
    '''Silhouette alpha = logistic(d / sigma), with d the screen-space distance
    to the nearest silhouette edge, positive on covered pixels.'''
    if sigma <= 0:
        raise ValueError('the soft mask sharpness must be positive')
    H, W = fragments.resolution
    positions = as_tensor(positions, dtype=torch.float64)
    edges = silhouette_edges(mesh, positions, camera, fragments)
    if len(edges) == 0:
        return as_tensor(fragments.covered, dtype=torch.float64)

    uv, _ = project(camera.to_camera(positions), camera)
    a, b = uv[as_tensor(edges[:, 0])], uv[as_tensor(edges[:, 1])]
    rows, cols = np.divmod(np.arange(H * W), W)
    pixels = as_tensor(np.stack([cols + 0.5, rows + 0.5], axis=1))

    nearest = torch.empty(H * W, dtype=torch.int64)
    with torch.no_grad():
        for start in range(0, H * W, chunk_size):
            p = pixels[start:start + chunk_size]
            nearest[start:start + chunk_size] = _segment_distance(p[:, None], a.detach()[None], b.detach()[None]).argmin(1)

    distance = _segment_distance(pixels, a[nearest], b[nearest])
    sign = as_tensor(np.where(fragments.covered.reshape(-1), 1.0, -1.0))
    return torch.sigmoid(sign * distance / sigma).reshape(H, W)


def _segment_distance(p, a, b):
    ab = b - a
    t = (((p - a) * ab).sum(-1) / (ab * ab).sum(-1).clamp(min=1e-300)).clamp(0.0, 1.0)
    closest = a + t[..., None] * ab
    return torch.sqrt(((p - closest) ** 2).sum(-1) + 1e-24)


def save_png(path, image):
    'Writes a [0, 1] image (H, W) or (H, W, 3) as an 8-bit PNG.'
    image = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    if image.ndim == 2:
        plt.imsave(path, image, cmap='gray', vmin=0.0, vmax=1.0)
    else:
        plt.imsave(path, image)


def load_png(path, channels: int = 3) -> np.ndarray:
    image = np.asarray(plt.imread(path), dtype=np.float64)
    if image.ndim == 2:
        image = image[..., None]
    return image[..., 0] if channels == 1 else image[..., :channels]


def save_grid(path, grid):
    np.save(path, np.asarray(grid, dtype=np.float64))


def load_grid(path) -> np.ndarray:
    return np.load(path)


def read_cameras(path) -> list[Camera]:
    '''One camera per line: fx fy cx cy width height, then the 3x4 row-major
    world-to-camera matrix.'''
    cameras = []
    with open(path) as f:
        for line in f:
            if not line.strip() or line.startswith('#'):
                continue
            v = [float(t) for t in line.split()]
            extrinsics = np.array(v[6:18]).reshape(3, 4)
            cameras.append(Camera(v[0], v[1], v[2], v[3], int(v[4]), int(v[5]),
                                  extrinsics[:, :3], extrinsics[:, 3]))
    logging.info(f'Read {len(cameras)} cameras from {path}')
    return cameras


def write_cameras(path, cameras: list[Camera]):
    with open(path, 'w') as f:
        f.write('# fx fy cx cy width height, world-to-camera [R | t] row-major\n')
        for c in cameras:
            extrinsics = np.concatenate([c.rotation, c.translation[:, None]], axis=1).reshape(-1)
            f.write(' '.join('%.17g' % v for v in [c.fx, c.fy, c.cx, c.cy, c.width, c.height])
                    + ' ' + ' '.join('%.17g' % v for v in extrinsics) + '\n')

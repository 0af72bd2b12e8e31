'''Reconstruction metrics: Chamfer distance and normal consistency between
meshes, PSNR and SSIM between masked images.

Mesh distances are measured from surface samples of one mesh to the exact
closest point on the other surface, so two triangulations of the same
surface score zero regardless of the sample count.'''

import json
import logging
import os

import numpy as np
import torch
from sklearn.neighbors import KDTree
from tqdm import tqdm

import util
from losses import ssim
from mesh import Mesh, read_obj
from render import load_png
from util import as_tensor


N_SAMPLES = 10000


def face_normals(mesh: Mesh) -> np.ndarray:
    corners = mesh.vertices[mesh.faces]
    normals = np.cross(corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0])
    return normals / np.linalg.norm(normals, axis=1, keepdims=True)


def sample_surface(mesh: Mesh, n: int, rng: np.random.Generator):
    'Area-weighted uniform surface samples and their face normals.'
    areas = mesh.face_areas()
    faces = rng.choice(mesh.n_faces, size=n, p=areas / areas.sum())
    r1, r2 = rng.random(n), rng.random(n)
    s = np.sqrt(r1)
    bary = np.stack([1 - s, s * (1 - r2), s * r2], axis=1)
    points = (bary[:, :, None] * mesh.vertices[mesh.faces[faces]]).sum(1)
    return points, face_normals(mesh)[faces], faces


def _ratio(num, den):
    return num / np.where(den == 0, 1.0, den)


def closest_on_triangles(p, a, b, c) -> np.ndarray:
    'Closest point to each p on the triangle (a, b, c) of the same row.'
    ab, ac = b - a, c - a
    dot = lambda u, v: (u * v).sum(-1)
    ap, bp, cp = p - a, p - b, p - c
    d1, d2 = dot(ab, ap), dot(ac, ap)
    d3, d4 = dot(ab, bp), dot(ac, bp)
    d5, d6 = dot(ab, cp), dot(ac, cp)
    va, vb, vc = d3 * d6 - d5 * d4, d5 * d2 - d1 * d6, d1 * d4 - d3 * d2

    total = va + vb + vc
    v, w = _ratio(vb, total), _ratio(vc, total)
    result = a + v[:, None] * ab + w[:, None] * ac

    # Voronoi regions of edges and corners, lowest precedence first.
    regions = [
        ((va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0),
         b + _ratio(d4 - d3, (d4 - d3) + (d5 - d6))[:, None] * (c - b)),
        ((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + _ratio(d2, d2 - d6)[:, None] * ac),
        ((d6 >= 0) & (d5 <= d6), c),
        ((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + _ratio(d1, d1 - d3)[:, None] * ab),
        ((d3 >= 0) & (d4 <= d3), b),
        ((d1 <= 0) & (d2 <= 0), a),
    ]
    for inside, point in regions:
        result = np.where(inside[:, None], point, result)
    return result


def closest_points(mesh: Mesh, points, k: int = 16):
    '''Exact closest surface points: (distances, face indices, points).

    The k faces with the nearest centers give an upper bound on the distance;
    every face whose center lies within that bound plus the largest
    center-to-corner distance is then checked.'''
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    corners = mesh.vertices[mesh.faces]
    centers = corners.mean(1)
    reach = np.linalg.norm(corners - centers[:, None], axis=2).max()
    tree = KDTree(centers)

    def nearest(rows, candidates):
        q = closest_on_triangles(points[rows], corners[candidates, 0], corners[candidates, 1],
                                 corners[candidates, 2])
        return np.linalg.norm(points[rows] - q, axis=1), q

    k = min(k, mesh.n_faces)
    _, near = tree.query(points, k=k)
    bound, _ = nearest(np.repeat(np.arange(len(points)), k), near.reshape(-1))
    bound = bound.reshape(-1, k).min(1)

    found = tree.query_radius(points, r=bound + reach + 1e-12 * max(mesh.bbox_diagonal(), 1.0))
    counts = np.array([len(c) for c in found])
    rows = np.repeat(np.arange(len(points)), counts)
    candidates = np.concatenate(list(found)).astype(np.int64)
    distances, q = nearest(rows, candidates)
    best = np.lexsort((distances, rows))[np.cumsum(counts) - counts]
    return distances[best], candidates[best], q[best]


def normal_consistency(normals_a, matched_b, normals_b, matched_a) -> float:
    '''Mean signed cosine between each sample normal and the normal of its
    match on the other surface, averaged over both directions. Flipped
    orientation scores -1.'''
    cos_a = (normals_a * matched_b).sum(1)
    cos_b = (normals_b * matched_a).sum(1)
    return 0.5 * float(cos_a.mean() + cos_b.mean())


def mesh_metrics(pred: Mesh, gt: Mesh, n_samples: int = N_SAMPLES, seed: int = 0, gt_band=None) -> dict:
    '''Chamfer distance and normal consistency. With a per-vertex band mask on
    the ground truth, also the Chamfer distance restricted to that region:
    ground-truth samples on band faces, and prediction samples whose closest
    ground-truth face is a band face.'''
    pred_points, pred_normals, _ = sample_surface(pred, n_samples, util.numpy_rng(seed))
    gt_points, gt_normals, gt_faces = sample_surface(gt, n_samples, util.numpy_rng(seed))
    d_pred, on_gt, _ = closest_points(gt, pred_points)
    d_gt, on_pred, _ = closest_points(pred, gt_points)
    result = {
        'chamfer': 0.5 * float((d_pred ** 2).mean() + (d_gt ** 2).mean()),
        'normal_consistency': normal_consistency(pred_normals, face_normals(gt)[on_gt],
                                                 gt_normals, face_normals(pred)[on_pred]),
    }
    if gt_band is not None:
        band_faces = np.asarray(gt_band, dtype=bool)[gt.faces].all(axis=1)
        terms = [(d[band_faces[faces]] ** 2).mean() for d, faces in ((d_gt, gt_faces), (d_pred, on_gt))
                 if band_faces[faces].any()]
        if terms:
            result['chamfer_band'] = float(np.mean(terms))
    return result


def psnr(pred, gt, mask=None) -> float:
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    weight = np.ones(pred.shape[:2]) if mask is None else np.asarray(mask, dtype=np.float64)
    weight = weight[..., None] if pred.ndim == 3 else weight
    weight = np.broadcast_to(weight, pred.shape)
    if weight.sum() == 0:
        return float('nan')
    mse = (weight * (pred - gt) ** 2).sum() / weight.sum()
    return float('inf') if mse == 0 else float(10 * np.log10(1.0 / mse))


def masked_ssim(pred, gt, mask=None) -> float:
    pred, gt = as_tensor(np.asarray(pred, dtype=np.float64)), as_tensor(np.asarray(gt, dtype=np.float64))
    if mask is not None:
        m = as_tensor(np.asarray(mask, dtype=np.float64))
        m = m[..., None] if pred.dim() == 3 else m
        pred, gt = pred * m, gt * m
    return float(ssim(pred, gt))


def evaluate_run(pred_dir, gt_dir, n_samples: int = N_SAMPLES, seed: int = 0) -> dict:
    '''Compares <pred>/meshes/NNNN.obj against <gt>/gt/NNNN.obj and, when
    present, <pred>/renders/NNNN.png against the ground-truth color frames.
    Writes <pred>/metrics.json and returns the per-frame and mean values.'''
    band_path = os.path.join(gt_dir, 'gt', 'band.npy')
    band = np.load(band_path) if os.path.exists(band_path) else None

    per_frame = []
    t = 0
    with tqdm() as progress:
        while os.path.exists(os.path.join(gt_dir, 'gt', f'{t:04d}.obj')):
            pred_path = os.path.join(pred_dir, 'meshes', f'{t:04d}.obj')
            if not os.path.exists(pred_path):
                logging.warning(f'missing prediction {pred_path}')
                break
            record = {'frame': t}
            record.update(mesh_metrics(read_obj(pred_path), read_obj(os.path.join(gt_dir, 'gt', f'{t:04d}.obj')),
                                       n_samples, seed, band))

            render_path = os.path.join(pred_dir, 'renders', f'{t:04d}.png')
            color_path = os.path.join(gt_dir, 'frames', f'{t:04d}.color')
            if os.path.exists(render_path):
                gt_color = np.load(color_path + '.npy') if os.path.exists(color_path + '.npy') \
                    else load_png(color_path + '.png')
                mask = load_png(os.path.join(gt_dir, 'frames', f'{t:04d}.mask.png'), 1)
                pred_color = load_png(render_path)
                record['psnr'] = psnr(pred_color, gt_color, mask)
                record['ssim'] = masked_ssim(pred_color, gt_color, mask)

            per_frame.append(record)
            progress.update()
            t += 1

    keys = sorted({k for r in per_frame for k in r if k != 'frame'})
    summary = {k: float(np.mean([r[k] for r in per_frame if k in r])) for k in keys}
    result = {'mean': summary, 'frames': per_frame}

    with open(os.path.join(pred_dir, 'metrics.json'), 'w') as f:
        json.dump(result, f, indent=2)
    print(util.now(), 'Metrics over', len(per_frame), 'frames:',
          ', '.join(f'{k} = {v:.6g}' for k, v in summary.items()))
    return result

'''Gradient-driven adaptive refinement of the base mesh.

Rendering-loss gradients are accumulated per rasterized face between passes.
A pass selects the faces with the largest mean gradient, drops the ones that
already have a short edge, splits every edge of the survivors at its
midpoint, flips the touched edges where that improves triangle quality and
cleans up. Face- and vertex-resident state is then carried over to the new
topology by inverse-distance-weighted nearest neighbors.'''

from dataclasses import dataclass, field
import collections
import json
import logging
import math

import numpy as np
from sklearn.neighbors import NearestNeighbors

from mesh import Mesh, validate
from skinning import idw_blend, limit_influences
from util import ConfigError


# Flips are only considered across edges whose two faces are nearly coplanar.
FLIP_MIN_NORMAL_COS = math.cos(math.radians(30))


@dataclass
class RemeshConfig:
    enabled: bool = True
    quantile_start: float = 0.9
    quantile_end: float = 0.98
    min_length_start: float = 0.04  # fraction of the bounding-box diagonal
    min_length_end: float = 0.01
    decay_epochs: int = 300
    merge_epsilon: float = 1e-6  # fraction of the bounding-box diagonal
    max_splits: int = 5000
    k: int = 3

    def __post_init__(self):
        for name in ('quantile_start', 'quantile_end'):
            if not 0 < getattr(self, name) <= 1:
                raise ConfigError(f'remesh.{name} must lie in (0, 1]')
        for name in ('min_length_start', 'min_length_end'):
            if getattr(self, name) <= 0:
                raise ConfigError(f'remesh.{name} must be positive')
        if self.decay_epochs < 1 or self.k < 1 or self.max_splits < 0 or self.merge_epsilon < 0:
            raise ConfigError('remesh.decay_epochs and remesh.k must be >= 1, '
                              'remesh.max_splits and remesh.merge_epsilon >= 0')

    def _progress(self, epoch):
        return min(max(epoch / self.decay_epochs, 0.0), 1.0)

    def quantile(self, epoch: int) -> float:
        t = self._progress(epoch)
        return self.quantile_start + t * (self.quantile_end - self.quantile_start)

    def min_length(self, epoch: int, diagonal: float) -> float:
        t = self._progress(epoch)
        return diagonal * (self.min_length_start + t * (self.min_length_end - self.min_length_start))


class GradientAccumulator:
    'Per-face sums of pixel gradient magnitudes and covered-pixel counts.'

    def __init__(self, n_faces: int):
        self.reset(n_faces)

    def reset(self, n_faces: int = None):
        n = len(self.sums) if n_faces is None else n_faces
        self.sums = np.zeros(n)
        self.counts = np.zeros(n, dtype=np.int64)
        self.iterations = 0

    @property
    def n_faces(self):
        return len(self.sums)

    def accumulate(self, fragments, pixel_grads) -> 'GradientAccumulator':
        pixel_grads = np.asarray(pixel_grads, dtype=np.float64)
        if pixel_grads.shape[:2] != fragments.face_id.shape:
            raise ValueError(f'gradient image {pixel_grads.shape[:2]} does not match '
                             f'fragments {fragments.face_id.shape}')
        magnitude = np.abs(pixel_grads) if pixel_grads.ndim == 2 else np.linalg.norm(pixel_grads, axis=2)
        faces = fragments.face_id.reshape(-1)
        covered = faces >= 0
        self.sums += np.bincount(faces[covered], weights=magnitude.reshape(-1)[covered],
                                 minlength=self.n_faces)
        self.counts += np.bincount(faces[covered], minlength=self.n_faces)
        self.iterations += 1
        return self

    def means(self) -> np.ndarray:
        'Mean gradient per face; NaN for faces that were never rasterized.'
        with np.errstate(invalid='ignore', divide='ignore'):
            return np.where(self.counts > 0, self.sums / self.counts, np.nan)


def accumulate(acc: GradientAccumulator, fragments, pixel_grads) -> GradientAccumulator:
    return acc.accumulate(fragments, pixel_grads)


def select_faces(mesh: Mesh, acc: GradientAccumulator, config: RemeshConfig, epoch: int):
    '''Returns (F_omega, F_delta): the top (1 - omega) share of rasterized faces
    by mean gradient (ties by ascending index), and the subset whose edges are
    all at least the current minimum length.'''
    if acc.n_faces != mesh.n_faces:
        raise ValueError(f'accumulator has {acc.n_faces} faces, mesh has {mesh.n_faces}')
    means = acc.means()
    eligible = np.flatnonzero(acc.counts > 0)
    if len(eligible) == 0:
        return eligible, eligible

    n_keep = math.ceil(round((1 - config.quantile(epoch)) * len(eligible), 9))
    n_keep = min(max(n_keep, 1), len(eligible))
    order = np.lexsort((eligible, -means[eligible]))
    f_omega = np.sort(eligible[order[:n_keep]])

    p, f = mesh.vertices, mesh.faces[f_omega]
    lengths = np.linalg.norm(p[f] - p[np.roll(f, -1, axis=1)], axis=2)
    f_delta = f_omega[(lengths >= config.min_length(epoch, mesh.bbox_diagonal())).all(axis=1)]
    return f_omega, f_delta


def select_edges(mesh: Mesh, acc: GradientAccumulator, config: RemeshConfig, epoch: int) -> np.ndarray:
    'Sorted indices into mesh.edges of all edges of the selected faces.'
    _, f_delta = select_faces(mesh, acc, config, epoch)
    return np.unique(mesh.face_edges[f_delta])


def edge_priority(mesh: Mesh, acc: GradientAccumulator) -> np.ndarray:
    'Per edge, the largest mean gradient among its rasterized faces (-inf if none).'
    means = np.nan_to_num(acc.means(), nan=-np.inf)
    priority = np.full(len(mesh.edges), -np.inf)
    np.maximum.at(priority, mesh.face_edges.reshape(-1), np.repeat(means, 3))
    return priority


@dataclass
class RemeshResult:
    mesh: Mesh
    face_parent: np.ndarray  # per new face, the old face it was cut from
    stats: dict = field(default_factory=dict)


class _Surface:
    'Mutable face list with an edge-to-face table, used during a pass.'

    def __init__(self, mesh: Mesh):
        self.vertices = [v for v in mesh.vertices]
        self.faces = mesh.faces.tolist()
        self.parent = list(range(mesh.n_faces))
        self.edge_faces = collections.defaultdict(set)
        self.neighbors = collections.defaultdict(set)
        for j, face in enumerate(self.faces):
            self._link(j, face)

    @staticmethod
    def _key(a, b):
        return (a, b) if a < b else (b, a)

    def _link(self, j, face):
        for k in range(3):
            a, b = face[k], face[(k + 1) % 3]
            self.edge_faces[self._key(a, b)].add(j)
            self.neighbors[a].add(b)
            self.neighbors[b].add(a)

    def _unlink(self, j, face):
        for k in range(3):
            key = self._key(face[k], face[(k + 1) % 3])
            self.edge_faces[key].discard(j)
            if not self.edge_faces[key]:
                del self.edge_faces[key]
                self.neighbors[key[0]].discard(key[1])
                self.neighbors[key[1]].discard(key[0])

    def set_face(self, j, face):
        self._unlink(j, self.faces[j])
        self.faces[j] = face
        self._link(j, face)

    def add_face(self, face, parent):
        self.faces.append(face)
        self.parent.append(parent)
        self._link(len(self.faces) - 1, face)

    def split(self, a, b) -> int:
        'Inserts the midpoint of edge (a, b); returns the new vertex.'
        m = len(self.vertices)
        self.vertices.append(0.5 * (self.vertices[a] + self.vertices[b]))
        for j in sorted(self.edge_faces[self._key(a, b)]):
            face = self.faces[j]
            k = face.index(a)
            u, v, c = face[k], face[(k + 1) % 3], face[(k + 2) % 3]
            if v != b:
                u, v, c = face[(k + 2) % 3], face[k], face[(k + 1) % 3]
            self.set_face(j, [u, m, c])
            self.add_face([m, v, c], self.parent[j])
        return m

    def opposite(self, j, a, b):
        return next(v for v in self.faces[j] if v != a and v != b)

    def directed(self, j, a, b):
        face = self.faces[j]
        k = face.index(a)
        return face[(k + 1) % 3] == b


def _angles(p, face):
    angles = []
    for k in range(3):
        u = p[face[(k + 1) % 3]] - p[face[k]]
        v = p[face[(k + 2) % 3]] - p[face[k]]
        cos = np.dot(u, v) / max(np.linalg.norm(u) * np.linalg.norm(v), 1e-300)
        angles.append(math.acos(min(max(cos, -1.0), 1.0)))
    return min(angles)


def _normal(p, face):
    n = np.cross(p[face[1]] - p[face[0]], p[face[2]] - p[face[0]])
    return n, np.linalg.norm(n)


def _try_flip(surface: _Surface, a, b, area_tolerance) -> bool:
    faces = sorted(surface.edge_faces.get(surface._key(a, b), ()))
    if len(faces) != 2:
        return False
    f1, f2 = faces
    if not surface.directed(f1, a, b):
        a, b = b, a
    if not surface.directed(f1, a, b) or not surface.directed(f2, b, a):
        return False
    c, d = surface.opposite(f1, a, b), surface.opposite(f2, a, b)
    if c == d or d in surface.neighbors[c]:
        return False
    if len(surface.neighbors[a]) <= 3 or len(surface.neighbors[b]) <= 3:
        return False

    p = surface.vertices
    old = ([a, b, c], [b, a, d])
    new = ([a, d, c], [d, b, c])
    (n1, l1), (n2, l2) = _normal(p, old[0]), _normal(p, old[1])
    if np.dot(n1, n2) < FLIP_MIN_NORMAL_COS * l1 * l2:
        return False
    average = n1 / l1 + n2 / l2
    for face in new:
        n, length = _normal(p, face)
        if 0.5 * length < area_tolerance or np.dot(n, average) <= 0:
            return False
    if min(_angles(p, f) for f in new) <= min(_angles(p, f) for f in old):
        return False

    surface.set_face(f1, new[0])
    surface.set_face(f2, new[1])
    return True


def _compact(vertices, faces):
    used = np.unique(faces)
    remap = np.full(len(vertices), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return vertices[used], remap[faces]


def remesh(mesh: Mesh, selected_edges, merge_epsilon: float = 1e-6, max_splits: int = None,
           priority=None) -> RemeshResult:
    '''Splits the selected edges (indices into mesh.edges) at their midpoints,
    flips touched edges that gain minimum angle, removes degenerate faces and
    merges near-coincident vertices. The result always passes validate().

    A split is skipped (and logged) when the edge is not manifold or when one
    of its halves would be degenerate. With max_splits, only the edges with
    the highest `priority` (one score per selected edge, ties by ascending
    edge index) are split; without priority, the lowest indices are kept.'''
    selected_edges = np.asarray(selected_edges, dtype=np.int64).reshape(-1)
    identity = RemeshResult(mesh, np.arange(mesh.n_faces),
                            dict(splits=0, flips=0, merges=0, skipped=0, removed=0))
    if len(selected_edges) == 0:
        return identity
    if max_splits is not None and len(selected_edges) > max_splits:
        if priority is None:
            order = np.argsort(selected_edges, kind='stable')
        else:
            priority = np.asarray(priority, dtype=np.float64).reshape(-1)
            if len(priority) != len(selected_edges):
                raise ValueError(f'{len(priority)} priorities for {len(selected_edges)} edges')
            order = np.lexsort((selected_edges, -priority))
        selected_edges = np.sort(selected_edges[order[:max_splits]])

    tolerance = mesh.area_tolerance()
    surface = _Surface(mesh)
    stats = dict(identity.stats)
    touched = set()

    for a, b in mesh.edges[selected_edges].tolist():
        incident = surface.edge_faces.get((a, b), ())
        if len(incident) == 0 or len(incident) > 2:
            logging.info(f'remesh: skipping split of edge ({a}, {b}) with {len(incident)} faces')
            stats['skipped'] += 1
            continue
        halves = [0.25 * _normal(surface.vertices, surface.faces[j])[1] for j in incident]
        if min(halves) < tolerance:
            logging.info(f'remesh: skipping split of edge ({a}, {b}) that would leave a degenerate face')
            stats['skipped'] += 1
            continue
        m = surface.split(a, b)
        stats['splits'] += 1
        for j in surface.edge_faces[surface._key(a, m)] | surface.edge_faces[surface._key(m, b)]:
            face = surface.faces[j]
            touched.update(surface._key(face[k], face[(k + 1) % 3]) for k in range(3))
    split_only = (np.array(surface.vertices), np.array(surface.faces, dtype=np.int64),
                  np.array(surface.parent, dtype=np.int64))

    for a, b in sorted(touched):
        if _try_flip(surface, a, b, tolerance):
            stats['flips'] += 1

    vertices = np.array(surface.vertices)
    faces = np.array(surface.faces, dtype=np.int64)
    parent = np.array(surface.parent, dtype=np.int64)

    areas = Mesh(vertices, faces).face_areas()
    keep = areas >= tolerance
    stats['removed'] = int((~keep).sum())
    faces, parent = faces[keep], parent[keep]

    faces, parent, stats['merges'] = _merge_close_vertices(
        vertices, faces, parent, merge_epsilon * mesh.bbox_diagonal())
    vertices, faces = _compact(vertices, faces)

    result = Mesh(vertices, faces)
    violations = validate(result)
    if violations:
        # Splits are individually guarded, so only the clean-up can be at fault.
        logging.warning(f'remesh: clean-up produced an invalid mesh ({violations[0]}); '
                        f'keeping the {stats["splits"]} splits without flips and merges')
        vertices, faces, parent = split_only
        stats.update(flips=0, merges=0, removed=0)
        result = Mesh(vertices, faces)
    return RemeshResult(result, parent, stats)


def _merge_close_vertices(vertices, faces, parent, epsilon):
    'Merges vertex pairs closer than epsilon one at a time, reverting merges that break validity.'
    if epsilon <= 0 or len(faces) == 0:
        return faces, parent, 0
    used = np.unique(faces)
    pairs = NearestNeighbors(radius=epsilon).fit(vertices[used]).radius_neighbors(
        vertices[used], return_distance=False)
    merges = 0
    for i, neighbors in enumerate(pairs):
        for j in sorted(neighbors):
            if j <= i:
                continue
            keep, drop = used[i], used[j]
            if not (faces == drop).any():
                continue
            candidate = np.where(faces == drop, keep, faces)
            alive = ~((candidate[:, 0] == candidate[:, 1]) | (candidate[:, 1] == candidate[:, 2])
                      | (candidate[:, 2] == candidate[:, 0]))
            if validate(Mesh(vertices, candidate[alive])):
                logging.info(f'remesh: skipping merge of vertices {keep} and {drop}')
                continue
            faces, parent = candidate[alive], parent[alive]
            merges += 1
    return faces, parent, merges


def transfer_attributes(old: Mesh, new: Mesh, face_attrs: dict = None, vertex_attrs: dict = None,
                        k: int = 3, skinning_keys=('W',)):
    '''Carries face- and vertex-indexed arrays from `old` to `new` by inverse
    distance weighting over the k nearest old face centers (resp. vertices).
    Coincident elements copy their old value exactly. Rows of arrays named in
    `skinning_keys` are re-limited and renormalized to sum to 1.'''
    face_attrs, vertex_attrs = face_attrs or {}, vertex_attrs or {}
    tolerance = 1e-12 * max(old.bbox_diagonal(), 1.0)
    out_faces, out_vertices = {}, {}

    for attrs, out, source, target in ((face_attrs, out_faces, old.face_centers(), new.face_centers()),
                                       (vertex_attrs, out_vertices, old.vertices, new.vertices)):
        if not attrs:
            continue
        for name, values in attrs.items():
            if len(values) != len(source):
                raise ValueError(f'attribute {name!r} has {len(values)} rows, expected {len(source)}')
        n_neighbors = min(k, len(source))
        distances, neighbors = NearestNeighbors(n_neighbors=n_neighbors).fit(source).kneighbors(target)
        exact = distances[:, 0] <= tolerance
        for name, values in attrs.items():
            blended = idw_blend(distances, neighbors, np.asarray(values, dtype=np.float64), tolerance)
            if name in skinning_keys and (~exact).any():
                blended[~exact] = limit_influences(blended[~exact])
            out[name] = blended

    return out_faces, out_vertices


class RemeshAudit:
    'Appends one JSON record per remesh pass.'

    def __init__(self, path):
        self.path = path

    def record(self, **fields):
        with open(self.path, 'a') as f:
            f.write(json.dumps(fields, sort_keys=True) + '\n')

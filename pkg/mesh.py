'Indexed triangle meshes: validation, per-face differential quantities and OBJ I/O.'

from dataclasses import dataclass
from functools import cached_property
import collections
import logging

import numpy as np
import scipy.sparse
from scipy.sparse.csgraph import connected_components
import torch

from util import as_tensor


# Faces with area below DEGENERATE_TOLERANCE * (bounding box diagonal)^2 are degenerate.
DEGENERATE_TOLERANCE = 1e-12


class MeshError(ValueError):
    'Raised for invalid or degenerate meshes and malformed OBJ files.'


class Mesh:
    '''An immutable indexed triangle mesh.

    Vertices are an (N, 3) float64 array, faces an (M, 3) int64 array with
    counterclockwise orientation. Edges are derived: each pair is stored with
    the smaller index first and the list is sorted lexicographically.
    Optionally carries per-face-corner UV coordinates, (M, 3, 2).'''

    def __init__(self, vertices, faces, uvs=None):
        self.vertices = np.array(vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.array(faces, dtype=np.int64).reshape(-1, 3)
        self.uvs = None if uvs is None else np.array(uvs, dtype=np.float64).reshape(-1, 3, 2)

        self.vertices.setflags(write=False)
        self.faces.setflags(write=False)
        if self.uvs is not None:
            self.uvs.setflags(write=False)

    def __repr__(self):
        return f'Mesh(V={self.n_vertices}, F={self.n_faces})'

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_faces(self):
        return len(self.faces)

    @cached_property
    def face_edges(self) -> np.ndarray:
        'For every face, the index into `edges` of its edges (v0,v1), (v1,v2), (v2,v0).'
        _, inverse = self._edge_table
        return inverse.reshape(-1, 3)

    @cached_property
    def edges(self) -> np.ndarray:
        edges, _ = self._edge_table
        return edges

    @cached_property
    def _edge_table(self):
        pairs = np.stack([self.faces, np.roll(self.faces, -1, axis=1)], axis=2).reshape(-1, 2)
        pairs = np.sort(pairs, axis=1)
        if len(pairs) == 0:
            return np.zeros((0, 2), dtype=np.int64), np.zeros(0, dtype=np.int64)
        edges, inverse = np.unique(pairs, axis=0, return_inverse=True)
        return edges, inverse.reshape(-1)

    @cached_property
    def edge_face_count(self) -> np.ndarray:
        return np.bincount(self.face_edges.reshape(-1), minlength=len(self.edges))

    @cached_property
    def boundary_edges(self) -> np.ndarray:
        return self.edges[self.edge_face_count == 1]

    def bbox_diagonal(self) -> float:
        if self.n_vertices == 0:
            return 0.0
        return float(np.linalg.norm(self.vertices.max(axis=0) - self.vertices.min(axis=0)))

    def area_tolerance(self) -> float:
        return DEGENERATE_TOLERANCE * self.bbox_diagonal() ** 2

    def face_areas(self, positions=None) -> np.ndarray:
        p = self.vertices if positions is None else np.asarray(positions, dtype=np.float64)
        f = self.faces
        cross = np.cross(p[f[:, 1]] - p[f[:, 0]], p[f[:, 2]] - p[f[:, 0]])
        return 0.5 * np.linalg.norm(cross, axis=1)

    def face_centers(self) -> np.ndarray:
        return self.vertices[self.faces].mean(axis=1)

    def valence(self) -> np.ndarray:
        return np.bincount(self.edges.reshape(-1), minlength=self.n_vertices)

    def components(self):
        'Returns (number of connected components, per-vertex component label).'
        e = self.edges
        adjacency = scipy.sparse.coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])),
                                            shape=(self.n_vertices, self.n_vertices))
        return connected_components(adjacency, directed=False)

    def with_vertices(self, vertices) -> 'Mesh':
        return Mesh(vertices, self.faces, self.uvs)

    def with_uvs(self, uvs) -> 'Mesh':
        return Mesh(self.vertices, self.faces, uvs)


def validate(mesh: Mesh) -> list[str]:
    '''Checks every Mesh invariant. Returns a list of violations (empty iff valid);
    each entry names the violated invariant and the offending indices.'''
    violations = []
    n, f = mesh.n_vertices, mesh.faces

    out_of_range = np.where((f < 0).any(axis=1) | (f >= n).any(axis=1))[0]
    for j in out_of_range:
        violations.append(f'face index out of range in face {j}')
    if len(out_of_range):
        # Nothing else can be evaluated safely.
        return violations

    repeated = np.where((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 2] == f[:, 0]))[0]
    for j in repeated:
        violations.append(f'repeated vertex in face {j}')

    if mesh.n_faces:
        counts = mesh.edge_face_count
        for l in np.where(counts > 2)[0]:
            a, b = mesh.edges[l]
            violations.append(f'non-manifold edge ({a}, {b}) shared by {counts[l]} faces')

        _, first, dup_counts = np.unique(np.sort(f, axis=1), axis=0,
                                         return_index=True, return_counts=True)
        for j in first[dup_counts > 1]:
            violations.append(f'duplicate face {j}')

        areas = mesh.face_areas()
        tolerance = mesh.area_tolerance()
        for j in np.where(areas < tolerance)[0]:
            if j not in repeated:
                violations.append(f'degenerate face {j} (area {areas[j]:.3g})')

    return violations


def assert_valid(mesh: Mesh):
    violations = validate(mesh)
    if violations:
        raise MeshError('invalid mesh: ' + '; '.join(violations[:10]))


@dataclass
class FaceFrame:
    '''Rest-pose per-face differential quantities.

    grad_ops[j] is the 3x3 matrix whose column k is the gradient of the hat
    function of corner k, so grad_ops[j] @ values gives the intrinsic gradient
    of a linear function with the given corner values.'''
    grad_ops: np.ndarray  # (M, 3, 3)
    areas: np.ndarray  # (M,)
    centers: np.ndarray  # (M, 3)
    normals: np.ndarray  # (M, 3)


def face_frame(mesh: Mesh) -> FaceFrame:
    p, f = mesh.vertices, mesh.faces
    v0, v1, v2 = p[f[:, 0]], p[f[:, 1]], p[f[:, 2]]
    cross = np.cross(v1 - v0, v2 - v0)
    double_area = np.linalg.norm(cross, axis=1)
    _check_degenerate(mesh, 0.5 * double_area)

    normals = cross / double_area[:, None]
    # Edges opposite each corner, counterclockwise.
    opposite = np.stack([v2 - v1, v0 - v2, v1 - v0], axis=1)
    grads = np.cross(normals[:, None, :], opposite) / double_area[:, None, None]
    return FaceFrame(grad_ops=np.transpose(grads, (0, 2, 1)),
                     areas=0.5 * double_area,
                     centers=(v0 + v1 + v2) / 3,
                     normals=normals)


def _check_degenerate(mesh: Mesh, areas):
    tolerance = mesh.area_tolerance()
    bad = np.where(np.asarray(areas) < tolerance)[0]
    if len(bad):
        raise MeshError(f'degenerate face {bad[0]} (area {float(areas[bad[0]]):.3g}, '
                        f'{len(bad)} degenerate faces in total)')


def _as_tensor(positions) -> torch.Tensor:
    if isinstance(positions, torch.Tensor):
        return positions
    return as_tensor(np.asarray(positions), dtype=torch.float64)


def _rest_inverse(mesh: Mesh) -> torch.Tensor:
    p, f = mesh.vertices, mesh.faces
    e1 = p[f[:, 1]] - p[f[:, 0]]
    e2 = p[f[:, 2]] - p[f[:, 0]]
    cross = np.cross(e1, e2)
    norm = np.linalg.norm(cross, axis=1)
    _check_degenerate(mesh, 0.5 * norm)
    frame = np.stack([e1, e2, cross / norm[:, None]], axis=2)
    return as_tensor(np.linalg.inv(frame))


def face_gradient(mesh: Mesh, positions) -> torch.Tensor:
    '''Per-face Jacobians (M, 3, 3) of the piecewise affine map taking the rest
    corners (mesh.vertices) to `positions`. Tangent directions follow the edges;
    the rest normal is mapped to the deformed normal. Differentiable in positions.'''
    x = _as_tensor(positions)
    if x.shape != (mesh.n_vertices, 3):
        raise MeshError(f'expected positions of shape ({mesh.n_vertices}, 3), got {tuple(x.shape)}')

    rest_inverse = _rest_inverse(mesh).to(x.dtype)
    f = as_tensor(mesh.faces)
    e1 = x[f[:, 1]] - x[f[:, 0]]
    e2 = x[f[:, 2]] - x[f[:, 0]]
    n = torch.nn.functional.normalize(torch.linalg.cross(e1, e2), dim=1, eps=1e-300)
    deformed = torch.stack([e1, e2, n], dim=2)
    return deformed @ rest_inverse


def face_geometry(mesh: Mesh, positions=None):
    '''Face centers, unit normals and areas at the given positions (torch, differentiable).
    Raises MeshError on degenerate faces.'''
    x = _as_tensor(mesh.vertices if positions is None else positions)
    f = as_tensor(mesh.faces)
    v0, v1, v2 = x[f[:, 0]], x[f[:, 1]], x[f[:, 2]]
    cross = torch.linalg.cross(v1 - v0, v2 - v0)
    double_area = cross.norm(dim=1)
    areas = 0.5 * double_area
    _check_degenerate(mesh, areas.detach().cpu().numpy())
    return (v0 + v1 + v2) / 3, cross / double_area[:, None], areas


def _obj_index(token: str, count: int) -> int:
    'Zero-based index of a 1-based OBJ reference; negative references count back from the last element read.'
    i = int(token)
    if i == 0 or not -count <= i <= count:
        raise ValueError(f'invalid index {i} with {count} elements defined')
    return i - 1 if i > 0 else count + i


def read_obj(path) -> Mesh:
    '''Reads positions, triangular faces and optional per-corner UVs.
    UVs are only kept when every face references texture coordinates.'''
    vertices, texcoords, faces, face_uvs = [], [], [], []

    with open(path) as f:
        for line_number, line in enumerate(f, 1):
            tokens = line.split()
            if not tokens or tokens[0].startswith('#'):
                continue
            try:
                if tokens[0] == 'v':
                    vertices.append([float(t) for t in tokens[1:4]])
                elif tokens[0] == 'vt':
                    u, v = float(tokens[1]), float(tokens[2])
                    texcoords.append([u, 1.0 - v])
                elif tokens[0] == 'f':
                    if len(tokens) != 4:
                        raise MeshError(f'{path}:{line_number}: only triangles are supported')
                    corners = [t.split('/') for t in tokens[1:]]
                    faces.append([_obj_index(c[0], len(vertices)) for c in corners])
                    if all(len(c) > 1 and c[1] for c in corners):
                        face_uvs.append([_obj_index(c[1], len(texcoords)) for c in corners])
            except (ValueError, IndexError) as e:
                raise MeshError(f'{path}:{line_number}: cannot parse {line.strip()!r} ({e})')

    uvs = None
    if faces and len(face_uvs) == len(faces):
        uvs = np.asarray(texcoords, dtype=np.float64)[np.asarray(face_uvs)]

    logging.info(f'Read {path}: {len(vertices)} vertices, {len(faces)} faces, uvs: {uvs is not None}')
    return Mesh(np.asarray(vertices, dtype=np.float64).reshape(-1, 3),
                np.asarray(faces, dtype=np.int64).reshape(-1, 3), uvs)


def write_obj(path, mesh: Mesh, positions=None):
    'Writes the mesh (optionally with replaced positions) with full float precision.'
    p = mesh.vertices if positions is None else np.asarray(positions, dtype=np.float64)

    with open(path, 'w') as f:
        f.write('# obj export\n')
        for vertex in p:
            f.write('v %.17g %.17g %.17g\n' % tuple(vertex))
        if mesh.uvs is not None:
            for corner_uvs in mesh.uvs:
                for u, v in corner_uvs:
                    f.write('vt %.17g %.17g\n' % (u, 1.0 - v))
            for j, face in enumerate(mesh.faces):
                f.write('f %d/%d %d/%d %d/%d\n' % (face[0] + 1, 3*j + 1,
                                                   face[1] + 1, 3*j + 2,
                                                   face[2] + 1, 3*j + 3))
        else:
            for face in mesh.faces:
                f.write('f %d %d %d\n' % tuple(face + 1))


def grid_mesh(nx: int, ny: int, size=(1.0, 1.0)) -> Mesh:
    'A flat, regularly triangulated rectangle in the z = 0 plane.'
    xs = np.linspace(0, size[0], nx + 1)
    ys = np.linspace(0, size[1], ny + 1)
    X, Y = np.meshgrid(xs, ys)
    vertices = np.stack([X.ravel(), Y.ravel(), np.zeros(X.size)], axis=1)
    faces = []
    for j in range(ny):
        for i in range(nx):
            a = j * (nx + 1) + i
            b, c, d = a + 1, a + nx + 1, a + nx + 2
            faces.extend([[a, b, d], [a, d, c]])
    return Mesh(vertices, faces)


def icosahedron() -> Mesh:
    t = (1 + 5 ** 0.5) / 2
    vertices = np.array([[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
                         [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
                         [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]], dtype=np.float64)
    vertices /= np.linalg.norm(vertices, axis=1, keepdims=True)
    faces = [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
             [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
             [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
             [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]]
    return Mesh(vertices, faces)


def edge_face_map(faces) -> dict:
    'Maps every sorted vertex pair to the list of faces containing it.'
    table = collections.defaultdict(list)
    for j, face in enumerate(np.asarray(faces).tolist()):
        for k in range(3):
            a, b = face[k], face[(k + 1) % 3]
            table[(min(a, b), max(a, b))].append(j)
    return table

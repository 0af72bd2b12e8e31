'''Least-squares fit of vertex positions to a per-face Jacobian field.

The normal equations (G^T A G) x = G^T A j of the area-weighted gradient
operator are assembled and factorized once per topology. The constant
nullspace of every connected component is removed by pinning its first
vertex; after the solve each component is translated back to its target
centroid.'''

import hashlib
import logging

import numpy as np
import scipy.sparse
from scipy.sparse.linalg import splu
import torch

from mesh import Mesh, MeshError, face_frame
from util import as_tensor


class TopologyMismatch(ValueError):
    'A PoissonSystem was used with data from a different mesh topology.'


def topology_id(mesh: Mesh) -> str:
    h = hashlib.sha1()
    h.update(np.int64(mesh.n_vertices).tobytes())
    h.update(np.ascontiguousarray(mesh.faces).tobytes())
    return h.hexdigest()


class PoissonSystem:
    'Prefactorized Poisson system for one mesh topology. Read-only once built.'

    def __init__(self, mesh: Mesh):
        frame = face_frame(mesh)
        n, m = mesh.n_vertices, mesh.n_faces

        self.topology_id = topology_id(mesh)
        self.n_vertices, self.n_faces = n, m
        self.areas = frame.areas

        # Row 3j+d holds the d-th component of the gradient on face j.
        rows = np.repeat(np.arange(3 * m), 3)
        cols = np.repeat(mesh.faces, 3, axis=0).reshape(-1)
        self.G = scipy.sparse.csr_matrix((frame.grad_ops.reshape(-1), (rows, cols)), shape=(3 * m, n))
        self.weights = np.repeat(self.areas, 3)
        self.laplacian = (self.G.T @ scipy.sparse.diags(self.weights) @ self.G).tocsc()

        self.n_components, self.labels = mesh.components()
        self.pinned = np.array([np.argmax(self.labels == c) for c in range(self.n_components)])
        self.free = np.ones(n, dtype=bool)
        self.free[self.pinned] = False
        self.component_sizes = np.bincount(self.labels, minlength=self.n_components)
        self.rest_centroids = self._centroids(mesh.vertices)

        reduced = self.laplacian[self.free][:, self.free].tocsc()
        try:
            self.factor = splu(reduced) if reduced.shape[0] else None
        except RuntimeError as e:
            raise MeshError(f'singular Poisson system after pinning ({e})')

        logging.info(f'Assembled Poisson system: {n} vertices, {m} faces, '
                     f'{self.n_components} components')

    def _centroids(self, x):
        sums = np.stack([np.bincount(self.labels, weights=x[:, c], minlength=self.n_components)
                         for c in range(x.shape[1])], axis=1)
        return sums / self.component_sizes[:, None]

    def _center(self, x):
        return x - self._centroids(x)[self.labels]

    def _solve_reduced(self, rhs, trans='N'):
        x = np.zeros_like(rhs)
        if self.factor is not None:
            x[self.free] = self.factor.solve(np.ascontiguousarray(rhs[self.free]), trans=trans)
        return x

    def _check_jacobians(self, jacobians):
        if jacobians.shape != (self.n_faces, 3, 3):
            raise TopologyMismatch(f'expected Jacobians of shape ({self.n_faces}, 3, 3), '
                                   f'got {jacobians.shape}')

    def rhs(self, jacobians) -> np.ndarray:
        j = np.asarray(jacobians, dtype=np.float64)
        self._check_jacobians(j)
        targets = np.transpose(j, (0, 2, 1)).reshape(3 * self.n_faces, 3)
        return self.G.T @ (self.weights[:, None] * targets)

    def solve(self, jacobians, anchor=None) -> np.ndarray:
        '''Vertex positions minimizing sum_j |f_j| ||grad(x) - J_j||^2.

        The component containing vertex 0 is translated so its centroid is
        `anchor` (its rest centroid if None); every other component keeps its
        rest centroid.'''
        x = self._center(self._solve_reduced(self.rhs(jacobians)))
        targets = self.rest_centroids.copy()
        if anchor is not None:
            targets[self.labels[0]] = np.asarray(anchor, dtype=np.float64)
        return x + targets[self.labels]

    def solve_adjoint(self, grad_positions) -> np.ndarray:
        'Gradient of a scalar loss with respect to the Jacobians, given its gradient w.r.t. solve().'
        g = np.asarray(grad_positions, dtype=np.float64)
        if g.shape != (self.n_vertices, 3):
            raise TopologyMismatch(f'expected position gradients of shape ({self.n_vertices}, 3), '
                                   f'got {g.shape}')
        adjoint = self._solve_reduced(self._center(g), trans='T')
        grad = self.weights[:, None] * (self.G @ adjoint)
        return np.transpose(grad.reshape(self.n_faces, 3, 3), (0, 2, 1))

    def matches(self, mesh: Mesh) -> bool:
        return topology_id(mesh) == self.topology_id


def assemble(mesh: Mesh) -> PoissonSystem:
    return PoissonSystem(mesh)


class PoissonSolve(torch.autograd.Function):
    'Differentiable wrapper: Jacobians (M, 3, 3) -> positions (N, 3).'

    @staticmethod
    def forward(ctx, jacobians, system, anchor):
        ctx.system = system
        x = system.solve(jacobians.detach().cpu().numpy(), anchor)
        return as_tensor(x, dtype=jacobians.dtype, device=jacobians.device)

    @staticmethod
    def backward(ctx, grad_positions):
        grad = ctx.system.solve_adjoint(grad_positions.detach().cpu().numpy())
        return as_tensor(grad, dtype=grad_positions.dtype, device=grad_positions.device), None, None


def poisson_solve(system: PoissonSystem, jacobians: torch.Tensor, anchor=None) -> torch.Tensor:
    return PoissonSolve.apply(jacobians, system, anchor)

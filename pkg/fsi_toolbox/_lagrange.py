"""Quadratic Lagrange elements on straight triangles.

Local dof order on a triangle (v0, v1, v2): the three vertices, then the
midpoints of the edges opposite v0, v1 and v2. Linear (pressure) dofs are the
vertex dofs, so a P1 field is stored on the first ``n_vertices`` entries of the
P2 numbering.
"""
from functools import cached_property
from typing import Dict, Tuple

import numpy as np
import scipy.sparse as sp

# 6-point rule, exact for polynomials of degree 4; weights are area fractions
_A, _B = 0.445948490915965, 0.091576213509771
_WA, _WB = 0.223381589678011, 0.109951743655322
QUADRATURE_POINTS = np.array(
    [
        [_A, _A],
        [1.0 - 2.0 * _A, _A],
        [_A, 1.0 - 2.0 * _A],
        [_B, _B],
        [1.0 - 2.0 * _B, _B],
        [_B, 1.0 - 2.0 * _B],
    ]
)
QUADRATURE_WEIGHTS = np.array([_WA, _WA, _WA, _WB, _WB, _WB])

# 3-point Gauss rule on [0, 1], exact for degree 5
EDGE_POINTS = 0.5 + 0.5 * np.array([-np.sqrt(0.6), 0.0, np.sqrt(0.6)])
EDGE_WEIGHTS = np.array([5.0, 8.0, 5.0]) / 18.0

LOCAL_EDGES = np.array([[1, 2], [2, 0], [0, 1]])

_GRAD_BARY = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])


def barycentric(points: np.ndarray) -> np.ndarray:
    xi, eta = points[:, 0], points[:, 1]
    return np.column_stack((1.0 - xi - eta, xi, eta))


def p1_values(points: np.ndarray) -> np.ndarray:
    return barycentric(points)


def p2_values(points: np.ndarray) -> np.ndarray:
    lam = barycentric(points)
    out = np.empty((len(points), 6))
    out[:, :3] = lam * (2.0 * lam - 1.0)
    for i, (j, k) in enumerate(LOCAL_EDGES):
        out[:, 3 + i] = 4.0 * lam[:, j] * lam[:, k]
    return out


def p2_gradients(points: np.ndarray) -> np.ndarray:
    """Reference gradients, shape (n_points, 6, 2)."""
    lam = barycentric(points)
    out = np.empty((len(points), 6, 2))
    for i in range(3):
        out[:, i] = (4.0 * lam[:, i] - 1.0)[:, None] * _GRAD_BARY[i]
    for i, (j, k) in enumerate(LOCAL_EDGES):
        out[:, 3 + i] = 4.0 * (
            lam[:, k, None] * _GRAD_BARY[j] + lam[:, j, None] * _GRAD_BARY[k]
        )
    return out


def edge_values(s: np.ndarray) -> np.ndarray:
    """Quadratic edge basis at parameters s, columns (start, end, midpoint)."""
    return np.column_stack(
        ((1.0 - s) * (1.0 - 2.0 * s), s * (2.0 * s - 1.0), 4.0 * s * (1.0 - s))
    )


class LagrangeSpace:
    """Scalar P2 space on a subset of the mesh triangles.

    Parameters
    ----------
    vertices : np.ndarray
        All mesh vertices.
    cells : np.ndarray
        (n_cells, 3) positively oriented triangles (global vertex ids).
    """

    def __init__(self, vertices: np.ndarray, cells: np.ndarray):
        self.cells = np.asarray(cells, dtype=np.int64)
        self.vertex_ids, local = np.unique(self.cells, return_inverse=True)
        local = local.reshape(self.cells.shape)
        self.n_vertices = len(self.vertex_ids)

        global_edges = np.sort(self.cells[:, LOCAL_EDGES], axis=2).reshape(-1, 2)
        self.edge_vertices, edge_index = np.unique(
            global_edges, axis=0, return_inverse=True
        )
        edge_index = edge_index.reshape(len(self.cells), 3)
        self.n_edges = len(self.edge_vertices)

        self.cell_dofs = np.hstack((local, self.n_vertices + edge_index))
        self.n_dofs = self.n_vertices + self.n_edges

        self.points = np.vstack(
            (
                vertices[self.vertex_ids],
                vertices[self.edge_vertices].mean(axis=1),
            )
        )
        self._coords = vertices[self.cells]

    @cached_property
    def _vertex_lookup(self) -> Dict[int, int]:
        return {int(v): i for i, v in enumerate(self.vertex_ids)}

    @cached_property
    def _edge_lookup(self) -> Dict[Tuple[int, int], int]:
        return {(int(a), int(b)): i for i, (a, b) in enumerate(self.edge_vertices)}

    def edge_dofs(self, edges: np.ndarray) -> np.ndarray:
        """(n_edges, 3) dofs (start, end, midpoint) of the given mesh edges,
        preserving the edge direction."""
        out = np.empty((len(edges), 3), dtype=np.int64)
        for row, (a, b) in enumerate(np.asarray(edges)):
            out[row, 0] = self._vertex_lookup[int(a)]
            out[row, 1] = self._vertex_lookup[int(b)]
            key = (int(min(a, b)), int(max(a, b)))
            out[row, 2] = self.n_vertices + self._edge_lookup[key]
        return out

    @cached_property
    def jacobians(self) -> np.ndarray:
        p = self._coords
        return np.stack((p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=2)

    @cached_property
    def areas(self) -> np.ndarray:
        return 0.5 * np.abs(np.linalg.det(self.jacobians))

    @cached_property
    def weights(self) -> np.ndarray:
        """(n_cells, n_q) physical quadrature weights."""
        return self.areas[:, None] * QUADRATURE_WEIGHTS[None, :]

    @cached_property
    def quadrature_points(self) -> np.ndarray:
        lam = barycentric(QUADRATURE_POINTS)
        return np.einsum("qi,cid->cqd", lam, self._coords)

    @cached_property
    def values(self) -> np.ndarray:
        """(n_q, 6) basis values at the quadrature points."""
        return p2_values(QUADRATURE_POINTS)

    @cached_property
    def pressure_values(self) -> np.ndarray:
        """(n_q, 3) linear basis values at the quadrature points."""
        return p1_values(QUADRATURE_POINTS)

    @cached_property
    def gradients(self) -> np.ndarray:
        """(n_cells, n_q, 6, 2) physical basis gradients."""
        inv_t = np.linalg.inv(self.jacobians).transpose(0, 2, 1)
        return np.einsum("cab,qib->cqia", inv_t, p2_gradients(QUADRATURE_POINTS))

    def assemble(self, local: np.ndarray, row_dofs=None, col_dofs=None, shape=None):
        """Sums local matrices (n_cells, r, c) into a sparse matrix."""
        row_dofs = self.cell_dofs if row_dofs is None else row_dofs
        col_dofs = self.cell_dofs if col_dofs is None else col_dofs
        if shape is None:
            shape = (self.n_dofs, self.n_dofs)
        rows = np.broadcast_to(row_dofs[:, :, None], local.shape)
        cols = np.broadcast_to(col_dofs[:, None, :], local.shape)
        return sp.coo_matrix(
            (local.ravel(), (rows.ravel(), cols.ravel())), shape=shape
        ).tocsr()

    def assemble_vector(self, local: np.ndarray, dofs=None, size=None) -> np.ndarray:
        dofs = self.cell_dofs if dofs is None else dofs
        size = self.n_dofs if size is None else size
        return np.bincount(dofs.ravel(), weights=local.ravel(), minlength=size)

    @cached_property
    def mass(self) -> sp.csr_matrix:
        local = np.einsum("cq,qi,qj->cij", self.weights, self.values, self.values)
        return self.assemble(local)

    @cached_property
    def stiffness(self) -> sp.csr_matrix:
        g = self.gradients
        local = np.einsum("cq,cqia,cqja->cij", self.weights, g, g)
        return self.assemble(local)

    @cached_property
    def pressure_dofs(self) -> np.ndarray:
        return self.cell_dofs[:, :3]

    @cached_property
    def pressure_mass(self) -> sp.csr_matrix:
        v = self.pressure_values
        local = np.einsum("cq,qi,qj->cij", self.weights, v, v)
        return self.assemble(
            local,
            self.pressure_dofs,
            self.pressure_dofs,
            (self.n_vertices, self.n_vertices),
        )

    @cached_property
    def pressure_mean(self) -> np.ndarray:
        """∫ψ_k for every linear basis function."""
        local = np.einsum("cq,qi->ci", self.weights, self.pressure_values)
        return self.assemble_vector(local, self.pressure_dofs, self.n_vertices)

    @cached_property
    def integrals(self) -> np.ndarray:
        """∫φ_k for every quadratic basis function."""
        local = np.einsum("cq,qi->ci", self.weights, self.values)
        return self.assemble_vector(local)

    def evaluate(self, coefficients: np.ndarray) -> np.ndarray:
        """Values of a scalar P2 field at the quadrature points, (n_cells, n_q)."""
        return np.einsum("qi,ci->cq", self.values, coefficients[self.cell_dofs])

    def evaluate_gradient(self, coefficients: np.ndarray) -> np.ndarray:
        """Gradient of a scalar P2 field at the quadrature points, (n_cells, n_q, 2)."""
        return np.einsum("cqia,ci->cqa", self.gradients, coefficients[self.cell_dofs])

    def evaluate_vector(self, coefficients: np.ndarray) -> np.ndarray:
        """Values of a component-blocked vector P2 field, (n_cells, n_q, 2)."""
        n = self.n_dofs
        return np.stack(
            (self.evaluate(coefficients[:n]), self.evaluate(coefficients[n:])), axis=2
        )

    def interpolate(self, fn) -> np.ndarray:
        """Nodal interpolant of fn(points) -> (n_dofs,) or (n_dofs, 2). Vector
        results are returned component-blocked."""
        values = np.asarray(fn(self.points), dtype=float)
        if values.ndim == 2:
            return np.concatenate((values[:, 0], values[:, 1]))
        return values


def edge_quadrature(
    start: np.ndarray, end: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gauss points along straight edges.

    Parameters
    ----------
    start, end : np.ndarray
        (n_edges, 2) endpoints.

    Returns
    -------
    points : np.ndarray
        (n_edges, 3, 2)
    weights : np.ndarray
        (n_edges, 3), edge length times the Gauss weights
    basis : np.ndarray
        (3, 3) quadratic edge basis (start, end, midpoint) at the Gauss points
    """
    s = EDGE_POINTS
    points = (
        start[:, None, :] * (1.0 - s)[None, :, None]
        + end[:, None, :] * s[None, :, None]
    )
    lengths = np.linalg.norm(end - start, axis=1)
    return points, lengths[:, None] * EDGE_WEIGHTS[None, :], edge_values(s)

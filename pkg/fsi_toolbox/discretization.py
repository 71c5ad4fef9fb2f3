import logging
import warnings
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, lobpcg, splu

from ._lagrange import LagrangeSpace, edge_quadrature
from .classes import InfSupFailure, RegionTag
from .exporters import write_coo
from .geometry import Mesh

logger = logging.getLogger(__name__)

INF_SUP_FLOOR = 1e-3
# below this many pressure dofs the inf-sup eigenproblem is solved densely
_DENSE_INF_SUP = 400


@dataclass
class FunctionSpaces:
    """Taylor–Hood spaces on the fluid and a quadratic space on the solid.

    Vector fields are stored component-blocked: the first ``fluid.n_dofs``
    entries hold the first component. Pressure dofs are the fluid vertex dofs.

    Attributes
    ----------
    mesh : Mesh
    fluid : LagrangeSpace
    solid : LagrangeSpace
    outer_edge_dofs : np.ndarray
        (n_outer_edges, 3) fluid dofs (start, end, midpoint) of the container wall.
    interface_edge_dofs : np.ndarray
        (n_interface_edges, 3) fluid dofs of the interface edges.
    solid_edge_dofs : np.ndarray
        The same interface edges in the solid numbering.
    interface_normals : np.ndarray
        (n_interface_edges, 2) unit normals exterior to the fluid.
    inf_sup : float
        Estimated discrete inf-sup constant, nan if not checked.
    """

    mesh: Mesh
    fluid: LagrangeSpace
    solid: LagrangeSpace
    outer_edge_dofs: np.ndarray
    interface_edge_dofs: np.ndarray
    solid_edge_dofs: np.ndarray
    interface_normals: np.ndarray
    inf_sup: float = float("nan")

    @property
    def n_fluid(self) -> int:
        """Scalar quadratic dofs per fluid velocity component."""
        return self.fluid.n_dofs

    @property
    def n_velocity(self) -> int:
        return 2 * self.fluid.n_dofs

    @property
    def n_pressure(self) -> int:
        return self.fluid.n_vertices

    @property
    def n_solid(self) -> int:
        return self.solid.n_dofs

    @cached_property
    def outer_dofs(self) -> np.ndarray:
        return np.unique(self.outer_edge_dofs)

    @cached_property
    def interface_dofs(self) -> np.ndarray:
        """Scalar fluid dofs on the interface, sorted."""
        return np.unique(self.interface_edge_dofs)

    @cached_property
    def solid_boundary_dofs(self) -> np.ndarray:
        """Solid dofs matching interface_dofs entry by entry."""
        lookup = dict(
            zip(self.interface_edge_dofs.ravel(), self.solid_edge_dofs.ravel())
        )
        return np.array([lookup[d] for d in self.interface_dofs], dtype=np.int64)

    @cached_property
    def interior_dofs(self) -> np.ndarray:
        """Scalar fluid dofs on neither boundary."""
        boundary = np.union1d(self.outer_dofs, self.interface_dofs)
        return np.setdiff1d(np.arange(self.n_fluid), boundary)

    @cached_property
    def interior_velocity_dofs(self) -> np.ndarray:
        return np.concatenate((self.interior_dofs, self.n_fluid + self.interior_dofs))

    @cached_property
    def solid_interior_dofs(self) -> np.ndarray:
        return np.setdiff1d(np.arange(self.n_solid), self.solid_boundary_dofs)

    @cached_property
    def boundary_dof_index(self) -> Dict[str, np.ndarray]:
        """Velocity (component-expanded) dofs on the container wall and on the
        interface."""
        n = self.n_fluid
        return {
            "outer": np.concatenate((self.outer_dofs, n + self.outer_dofs)),
            "interface": np.concatenate((self.interface_dofs, n + self.interface_dofs)),
        }

    @cached_property
    def interface_frame(self) -> Dict[str, np.ndarray]:
        """Polar angle, unit normal (into the solid) and unit counter-clockwise
        tangent at every interface dof, ordered as interface_dofs.

        Midpoint normals are the edge normals; vertex normals average the two
        adjacent edges.
        """
        normals = np.zeros((self.n_fluid, 2))
        for column in range(3):
            np.add.at(
                normals, self.interface_edge_dofs[:, column], self.interface_normals
            )
        normals = normals[self.interface_dofs]
        normals /= np.linalg.norm(normals, axis=1)[:, None]
        points = self.fluid.points[self.interface_dofs]
        return {
            "theta": np.arctan2(points[:, 1], points[:, 0]),
            "normal": normals,
            "tangent": np.column_stack((normals[:, 1], -normals[:, 0])),
            "points": points,
        }

    def interface_values(self, field: np.ndarray) -> np.ndarray:
        """(n_interface_dofs, 2) trace of a component-blocked fluid field."""
        n = self.n_fluid
        dofs = self.interface_dofs
        return np.column_stack((field[dofs], field[n + dofs]))

    def extend_interface(self, values: np.ndarray) -> np.ndarray:
        """Component-blocked fluid field equal to values on the interface dofs and
        zero elsewhere (the trivial extension)."""
        out = np.zeros(self.n_velocity)
        out[self.interface_dofs] = values[:, 0]
        out[self.n_fluid + self.interface_dofs] = values[:, 1]
        return out


def build_spaces(
    mesh: Mesh, check_inf_sup: bool = True, rng: Optional[np.random.Generator] = None
) -> FunctionSpaces:
    """Builds the fluid Taylor–Hood pair and the solid quadratic space.

    Parameters
    ----------
    mesh : Mesh
    check_inf_sup : bool
        If True, estimates the discrete inf-sup constant.
    rng : Optional[np.random.Generator]
        Start vector source for the inf-sup eigensolver.

    Returns
    -------
    FunctionSpaces

    Raises
    ------
    InfSupFailure
        Raised if the inf-sup estimate falls below 1e-3.
    """
    fluid = LagrangeSpace(mesh.vertices, mesh.region(RegionTag.FLUID))
    solid = LagrangeSpace(mesh.vertices, mesh.region(RegionTag.SOLID))

    spaces = FunctionSpaces(
        mesh=mesh,
        fluid=fluid,
        solid=solid,
        outer_edge_dofs=fluid.edge_dofs(mesh.outer_edges),
        interface_edge_dofs=fluid.edge_dofs(mesh.interface_edges),
        solid_edge_dofs=solid.edge_dofs(mesh.interface_edges),
        interface_normals=mesh.interface_normals(),
    )
    overlap = np.intersect1d(spaces.outer_dofs, spaces.interface_dofs)
    if len(overlap):
        raise InfSupFailure(f"{len(overlap)} dofs lie on both boundaries")

    logger.info(
        "spaces: %d velocity, %d pressure, %d solid dofs",
        spaces.n_velocity,
        spaces.n_pressure,
        2 * spaces.n_solid,
    )
    if check_inf_sup:
        beta = inf_sup_constant(spaces, rng=rng)
        spaces.inf_sup = beta
        if beta < INF_SUP_FLOOR:
            raise InfSupFailure(f"inf-sup estimate {beta:.3e} below {INF_SUP_FLOOR}")
        logger.info("inf-sup estimate %.4f", beta)
    return spaces


def inf_sup_constant(
    spaces: FunctionSpaces, rng: Optional[np.random.Generator] = None
) -> float:
    """Smallest nonconstant β with β² M_p x = D L⁻¹ Dᵀ x, L the vector Laplacian
    on velocities vanishing on the whole fluid boundary.

    Parameters
    ----------
    spaces : FunctionSpaces
    rng : Optional[np.random.Generator]

    Returns
    -------
    float
    """
    fluid = spaces.fluid
    n = spaces.n_fluid
    free = np.concatenate((spaces.interior_dofs, n + spaces.interior_dofs))
    laplacian = sp.block_diag((fluid.stiffness, fluid.stiffness)).tocsr()
    divergence = divergence_matrix(fluid)[:, free].tocsc()
    lu = splu(laplacian[free][:, free].tocsc())
    pressure_mass = fluid.pressure_mass.tocsc()
    mean = fluid.pressure_mean

    def schur(x):
        x = np.asarray(x)
        if x.ndim == 1:
            return divergence @ lu.solve(np.asarray(divergence.T @ x))
        return np.column_stack([schur(col) for col in x.T])

    n_p = spaces.n_pressure
    if n_p <= _DENSE_INF_SUP:
        basis = la.null_space(mean[None, :])
        dense = schur(basis)
        reduced = basis.T @ dense
        mass = basis.T @ (pressure_mass @ basis)
        value = la.eigh(0.5 * (reduced + reduced.T), mass, eigvals_only=True)[0]
        return float(np.sqrt(max(value, 0.0)))

    rng = np.random.default_rng(0) if rng is None else rng
    mass_lu = splu(pressure_mass)
    operator = LinearOperator((n_p, n_p), matvec=schur, matmat=schur, dtype=float)
    preconditioner = LinearOperator(
        (n_p, n_p), matvec=mass_lu.solve, matmat=mass_lu.solve, dtype=float
    )
    start = rng.standard_normal((n_p, 1))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        values, _ = lobpcg(
            operator,
            start,
            B=pressure_mass,
            M=preconditioner,
            Y=np.ones((n_p, 1)),
            tol=1e-8,
            maxiter=200,
            largest=False,
        )
    for warning in caught:
        logger.warning("inf-sup eigensolver: %s", warning.message)
    return float(np.sqrt(max(values[0], 0.0)))


def divergence_matrix(fluid: LagrangeSpace) -> sp.csr_matrix:
    """∫ ψ_k div φ for linear ψ_k and component-blocked quadratic φ."""
    g = fluid.gradients
    shape = (fluid.n_vertices, fluid.n_dofs)
    blocks = []
    for component in range(2):
        local = np.einsum(
            "cq,qk,cqj->ckj", fluid.weights, fluid.pressure_values, g[..., component]
        )
        blocks.append(
            fluid.assemble(local, fluid.pressure_dofs, fluid.cell_dofs, shape)
        )
    return sp.hstack(blocks).tocsr()


def strain_matrix(space: LagrangeSpace, coefficient: float = 1.0) -> sp.csr_matrix:
    """2·coefficient·∫ D(u):D(v) for component-blocked quadratic fields."""
    g = space.gradients
    w = coefficient * space.weights
    gx, gy = g[..., 0], g[..., 1]
    k11 = np.einsum("cq,cqi,cqj->cij", w, gx, gx) * 2.0 + np.einsum(
        "cq,cqi,cqj->cij", w, gy, gy
    )
    k22 = np.einsum("cq,cqi,cqj->cij", w, gx, gx) + 2.0 * np.einsum(
        "cq,cqi,cqj->cij", w, gy, gy
    )
    k12 = np.einsum("cq,cqi,cqj->cij", w, gy, gx)
    k11, k22, k12 = (space.assemble(local) for local in (k11, k22, k12))
    return sp.bmat([[k11, k12], [k12.T, k22]]).tocsr()


@dataclass(frozen=True)
class FormLibrary:
    """Assembled bilinear forms.

    Attributes
    ----------
    viscosity : float
    mass_matrix : sp.csr_matrix
        L² inner product of fluid velocities.
    viscous_matrix : sp.csr_matrix
        2ν∫D(u):D(v) on fluid velocities.
    divergence_matrix : sp.csr_matrix
        ∫ q div u, pressure rows and velocity columns.
    rigid_trace : sp.csr_matrix
        (n_velocity, 3) map (h′₁, h′₂, ω) ↦ h′+ω∧y on interface dofs.
    boundary_flux : np.ndarray
        Row vector of u ↦ ∫_{∂𝒮} u·n dΓ.
    scalar_mass, scalar_stiffness : sp.csr_matrix
        Scalar quadratic fluid forms.
    pressure_mass : sp.csr_matrix
    pressure_mean : np.ndarray
        ∫ψ_k, the zero-mean constraint row.
    solid_mass, solid_strain : sp.csr_matrix
        Vector L² product and 2∫D:D on the solid.
    solid_stiffness, solid_scalar_mass : sp.csr_matrix
        Scalar Laplacian and mass on the solid.
    """

    viscosity: float
    mass_matrix: sp.csr_matrix
    viscous_matrix: sp.csr_matrix
    divergence_matrix: sp.csr_matrix
    rigid_trace: sp.csr_matrix
    boundary_flux: np.ndarray
    scalar_mass: sp.csr_matrix
    scalar_stiffness: sp.csr_matrix
    pressure_mass: sp.csr_matrix
    pressure_mean: np.ndarray
    solid_mass: sp.csr_matrix
    solid_strain: sp.csr_matrix
    solid_stiffness: sp.csr_matrix
    solid_scalar_mass: sp.csr_matrix

    @cached_property
    def vector_laplacian(self) -> sp.csr_matrix:
        return sp.block_diag((self.scalar_stiffness, self.scalar_stiffness)).tocsr()

    @cached_property
    def solid_vector_laplacian(self) -> sp.csr_matrix:
        return sp.block_diag((self.solid_stiffness, self.solid_stiffness)).tocsr()

    def dump(self, directory: Union[Path, str]):
        """Writes the main fluid matrices in coordinate text format."""
        directory = Path(directory)
        for name in ("mass_matrix", "viscous_matrix", "divergence_matrix"):
            write_coo(directory / f"{name}.txt", getattr(self, name))


def rigid_field(points: np.ndarray) -> np.ndarray:
    """(n_points, 2, 3) values of the rigid generators e₁, e₂ and ω∧y."""
    out = np.zeros((len(points), 2, 3))
    out[:, 0, 0] = 1.0
    out[:, 1, 1] = 1.0
    out[:, 0, 2] = -points[:, 1]
    out[:, 1, 2] = points[:, 0]
    return out


def assemble_forms(spaces: FunctionSpaces, viscosity: float) -> FormLibrary:
    """Assembles every bilinear form used downstream.

    Parameters
    ----------
    spaces : FunctionSpaces
    viscosity : float
        Kinematic viscosity ν.

    Returns
    -------
    FormLibrary
    """
    fluid, solid = spaces.fluid, spaces.solid
    n = spaces.n_fluid

    iface = spaces.interface_dofs
    generators = rigid_field(fluid.points[iface])
    rows = np.concatenate([iface, n + iface] * 3)
    cols = np.repeat([0, 1, 2], 2 * len(iface))
    data = np.concatenate(
        [np.concatenate((generators[:, 0, k], generators[:, 1, k])) for k in range(3)]
    )
    keep = data != 0.0
    rigid_trace = sp.csr_matrix(
        (data[keep], (rows[keep], cols[keep])), shape=(2 * n, 3)
    )

    edges = spaces.interface_edge_dofs
    start = fluid.points[edges[:, 0]]
    end = fluid.points[edges[:, 1]]
    _, weights, basis = edge_quadrature(start, end)
    edge_integrals = weights @ basis  # (n_edges, 3): ∫ N_a over each edge
    flux = np.zeros(2 * n)
    for component in range(2):
        np.add.at(
            flux,
            component * n + edges,
            edge_integrals * spaces.interface_normals[:, component, None],
        )

    forms = FormLibrary(
        viscosity=float(viscosity),
        mass_matrix=sp.block_diag((fluid.mass, fluid.mass)).tocsr(),
        viscous_matrix=strain_matrix(fluid, viscosity),
        divergence_matrix=divergence_matrix(fluid),
        rigid_trace=rigid_trace,
        boundary_flux=flux,
        scalar_mass=fluid.mass,
        scalar_stiffness=fluid.stiffness,
        pressure_mass=fluid.pressure_mass,
        pressure_mean=fluid.pressure_mean,
        solid_mass=sp.block_diag((solid.mass, solid.mass)).tocsr(),
        solid_strain=strain_matrix(solid),
        solid_stiffness=solid.stiffness,
        solid_scalar_mass=solid.mass,
    )
    logger.debug(
        "forms: viscous nnz %d, divergence nnz %d",
        forms.viscous_matrix.nnz,
        forms.divergence_matrix.nnz,
    )
    return forms

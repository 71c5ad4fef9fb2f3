"""Neumann potentials, Stokes liftings, the Leray projection and the coupled
fluid/rigid block system on the reference configuration.

Coupled states are stored in reduced coordinates V = (u_I, h′₁, h′₂, ω): the
velocity dofs away from both fluid boundaries followed by the rigid velocity.
The prolongation T rebuilds the full fluid velocity, equal to h′ + ω∧y on the
interface and zero on the container wall.
"""
import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, Optional, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import norm as sparse_norm, splu

from ._lagrange import edge_quadrature
from .classes import FluxViolation, SolverDivergence
from .discretization import FormLibrary, FunctionSpaces
from .geometry import RigidBodyData

logger = logging.getLogger(__name__)

SOLVER_TOLERANCE = 1e-10
FLUX_TOLERANCE = 1e-8


def _factor(matrix: sp.spmatrix, label: str):
    try:
        return splu(sp.csc_matrix(matrix))
    except RuntimeError as ex:
        raise SolverDivergence(f"{label}: factorization failed ({ex})") from ex


def _backward_error(matrix, solution, rhs, norm) -> float:
    residual = matrix @ solution - rhs
    scale = norm * np.linalg.norm(solution, np.inf) + np.linalg.norm(rhs, np.inf)
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(residual, np.inf) / scale)


class SaddleSolver:
    """Factorization of the bordered saddle-point matrix

        [[αK + β𝕄, Bᵀ, 0], [B, 0, m], [0, mᵀ, 0]]

    where m is the pressure mean row fixing the constant pressure mode.
    """

    def __init__(self, matrix: sp.csc_matrix, n: int, n_p: int, tol: float, label: str):
        self.matrix = matrix
        self.n = n
        self.n_p = n_p
        self.tol = tol
        self.label = label
        self._norm = float(abs(matrix).sum(axis=1).max())
        self._lu = _factor(matrix, label)

    def solve(
        self, rhs: np.ndarray, constraint_rhs: Optional[np.ndarray] = None
    ) -> Tuple[np.ndarray, np.ndarray]:
        """Returns (v, p) for a right-hand side (n,) or (n, k)."""
        rhs = np.asarray(rhs, dtype=float)
        columns = rhs.shape[1:] if rhs.ndim == 2 else ()
        full = np.zeros((self.n + self.n_p + 1,) + columns)
        full[: self.n] = rhs
        if constraint_rhs is not None:
            full[self.n : self.n + self.n_p] = constraint_rhs
        solution = self._lu.solve(full)
        if not np.all(np.isfinite(solution)):
            raise SolverDivergence(f"{self.label}: non-finite solution")
        error = _backward_error(self.matrix, solution, full, self._norm)
        if error > self.tol:
            raise SolverDivergence(f"{self.label}: backward error {error:.2e}")
        return solution[: self.n], solution[self.n : self.n + self.n_p]


@dataclass
class SaddlePencil:
    """Stiffness, mass and divergence constraint of a constrained pencil."""

    stiffness: sp.csr_matrix
    mass: sp.csr_matrix
    constraint: sp.csr_matrix
    pressure_mean: np.ndarray
    tol: float = SOLVER_TOLERANCE
    _solvers: Dict[Tuple[float, float], SaddleSolver] = field(
        default_factory=dict, repr=False
    )

    @property
    def size(self) -> int:
        return self.stiffness.shape[0]

    @property
    def n_pressure(self) -> int:
        return self.constraint.shape[0]

    def matrix(self, alpha: float, beta: float) -> sp.csc_matrix:
        mean = sp.csr_matrix(self.pressure_mean[:, None])
        return sp.bmat(
            [
                [alpha * self.stiffness + beta * self.mass, self.constraint.T, None],
                [self.constraint, None, mean],
                [None, mean.T, None],
            ]
        ).tocsc()

    def factor(self, alpha: float, beta: float) -> SaddleSolver:
        """Cached factorization of the saddle matrix for αK + β𝕄."""
        key = (float(alpha), float(beta))
        if key not in self._solvers:
            logger.debug("factorizing saddle matrix alpha=%.3e beta=%.3e", *key)
            self._solvers[key] = SaddleSolver(
                self.matrix(alpha, beta),
                self.size,
                self.n_pressure,
                self.tol,
                f"saddle solve (alpha={key[0]:.3g}, beta={key[1]:.3g})",
            )
        return self._solvers[key]

    @cached_property
    def _gram(self):
        mean = sp.csr_matrix(self.pressure_mean[:, None])
        gram = sp.bmat([[self.constraint @ self.constraint.T, mean], [mean.T, None]])
        return _factor(gram, "constraint Gram matrix")

    def constrained_part(self, residual: np.ndarray) -> np.ndarray:
        """Euclidean projection of residual onto the kernel of the constraint."""
        full = np.concatenate((self.constraint @ residual, [0.0]))
        return residual - self.constraint.T @ self._gram.solve(full)[:-1]


@dataclass(frozen=True)
class NeumannSolution:
    """Zero-mean potential q and its boundary moments.

    Attributes
    ----------
    potential : np.ndarray
        Scalar quadratic fluid field.
    gradient_flux : np.ndarray
        (∫ q n₁, ∫ q n₂, ∫ q y∧n) over the interface.
    datum : np.ndarray
        The rigid velocity (h′₁, h′₂, ω) defining the Neumann datum.
    residual : float
    """

    potential: np.ndarray
    gradient_flux: np.ndarray
    datum: np.ndarray
    residual: float


@dataclass(frozen=True)
class LiftedField:
    """Stokes lifting of an interface datum.

    Attributes
    ----------
    velocity : np.ndarray
        Component-blocked fluid field, zero on the container wall.
    pressure : np.ndarray
        Zero-mean linear pressure.
    flux : float
        Net flux of the datum through the interface.
    """

    velocity: np.ndarray
    pressure: np.ndarray
    flux: float


class FluidOperators:
    """Solvers on the fixed fluid domain, one cached factorization per problem.

    Parameters
    ----------
    spaces : FunctionSpaces
    forms : FormLibrary
    tol : float
        Backward error accepted from the sparse direct solves.
    """

    def __init__(
        self, spaces: FunctionSpaces, forms: FormLibrary, tol: float = SOLVER_TOLERANCE
    ):
        self.spaces = spaces
        self.forms = forms
        self.tol = tol

        edges = spaces.interface_edge_dofs
        points = spaces.fluid.points
        self._edge_points, self._edge_weights, self._edge_basis = edge_quadrature(
            points[edges[:, 0]], points[edges[:, 1]]
        )

    @cached_property
    def _neumann(self):
        stiffness = self.forms.scalar_stiffness
        integrals = sp.csr_matrix(self.spaces.fluid.integrals[:, None])
        matrix = sp.bmat([[stiffness, integrals], [integrals.T, None]]).tocsc()
        return matrix, float(abs(matrix).sum(axis=1).max()), _factor(matrix, "Neumann")

    @cached_property
    def _stokes(self):
        free = self.spaces.interior_velocity_dofs
        pencil = SaddlePencil(
            stiffness=self.forms.viscous_matrix[free][:, free],
            mass=sp.csr_matrix((len(free), len(free))),
            constraint=self.forms.divergence_matrix[:, free],
            pressure_mean=self.forms.pressure_mean,
            tol=self.tol,
        )
        return pencil.factor(1.0, 0.0)

    @cached_property
    def interface_mass(self) -> sp.csr_matrix:
        """Scalar L² product on the interface, fluid numbering."""
        local = np.einsum(
            "eq,qa,qb->eab", self._edge_weights, self._edge_basis, self._edge_basis
        )
        dofs = self.spaces.interface_edge_dofs
        rows = np.broadcast_to(dofs[:, :, None], local.shape)
        cols = np.broadcast_to(dofs[:, None, :], local.shape)
        n = self.spaces.n_fluid
        return sp.coo_matrix(
            (local.ravel(), (rows.ravel(), cols.ravel())), shape=(n, n)
        ).tocsr()

    def interface_inner(self, left: np.ndarray, right: np.ndarray) -> float:
        """∫ ζ₁·ζ₂ over the interface of two (n_interface_dofs, 2) data."""
        a = self.spaces.extend_interface(left)
        b = self.spaces.extend_interface(right)
        n = self.spaces.n_fluid
        mass = self.interface_mass
        return float(a[:n] @ (mass @ b[:n]) + a[n:] @ (mass @ b[n:]))

    def neumann_rhs(self, datum) -> np.ndarray:
        """Load vector of the boundary datum ((h′ + ω∧y)·n) on the interface."""
        h1, h2, omega = np.asarray(datum, dtype=float)
        y = self._edge_points
        normals = self.spaces.interface_normals[:, None, :]
        velocity = np.stack((h1 - omega * y[..., 1], h2 + omega * y[..., 0]), axis=2)
        normal_velocity = (velocity * normals).sum(axis=2)
        local = np.einsum(
            "eq,qa,eq->ea", self._edge_weights, self._edge_basis, normal_velocity
        )
        return np.bincount(
            self.spaces.interface_edge_dofs.ravel(),
            weights=local.ravel(),
            minlength=self.spaces.n_fluid,
        )

    def solve_potential(self, rhs: np.ndarray) -> Tuple[np.ndarray, float]:
        """Zero-mean q with ∫∇q·∇φ = rhs(φ) for every quadratic φ."""
        matrix, norm, lu = self._neumann
        full = np.concatenate((rhs, [0.0]))
        solution = lu.solve(full)
        if not np.all(np.isfinite(solution)):
            raise SolverDivergence("Neumann solve returned non-finite values")
        error = _backward_error(matrix, solution, full, norm)
        if error > self.tol:
            raise SolverDivergence(f"Neumann solve backward error {error:.2e}")
        return solution[:-1], error

    def solve_neumann(self, datum) -> NeumannSolution:
        """Potential of the rigid velocity datum (h′₁, h′₂, ω).

        Solves Δq = 0 in the fluid, ∂q/∂n = (h′ + ω∧y)·n on the interface and
        ∂q/∂n = 0 on the container wall, with ∫q = 0.
        """
        datum = np.asarray(datum, dtype=float)
        potential, error = self.solve_potential(self.neumann_rhs(datum))
        return NeumannSolution(
            potential=potential,
            gradient_flux=self.boundary_integrals(potential),
            datum=datum,
            residual=error,
        )

    def boundary_integrals(self, potential: np.ndarray) -> np.ndarray:
        """(∫ q n₁, ∫ q n₂, ∫ q y∧n) over the interface."""
        trace = self._edge_basis @ potential[self.spaces.interface_edge_dofs].T
        values = self._edge_weights * trace.T  # (n_edges, n_q)
        y = self._edge_points
        n = self.spaces.interface_normals
        moment = y[..., 0] * n[:, None, 1] - y[..., 1] * n[:, None, 0]
        return np.array(
            [
                (values * n[:, None, 0]).sum(),
                (values * n[:, None, 1]).sum(),
                (values * moment).sum(),
            ]
        )

    def interface_flux(self, values: np.ndarray) -> float:
        """∫ ζ·n over the interface of interface dof values (n_dofs, 2)."""
        return float(self.forms.boundary_flux @ self.spaces.extend_interface(values))

    def lift_stokes(self, values: np.ndarray, check_flux: bool = True) -> LiftedField:
        """Stokes lifting of interface dof values.

        Parameters
        ----------
        values : np.ndarray
            (n_interface_dofs, 2) datum ordered as spaces.interface_dofs.
        check_flux : bool

        Returns
        -------
        LiftedField

        Raises
        ------
        FluxViolation
            Raised if the net flux exceeds 1e-8 times ∫|ζ·n|.
        """
        extended = self.spaces.extend_interface(np.asarray(values, dtype=float))
        flux = float(self.forms.boundary_flux @ extended)
        scale = float(np.abs(self.forms.boundary_flux) @ np.abs(extended))
        if check_flux and abs(flux) > FLUX_TOLERANCE * max(scale, 1e-300):
            raise FluxViolation(
                f"interface datum has net flux {flux:.3e} (scale {scale:.3e})"
            )

        free = self.spaces.interior_velocity_dofs
        load = -(self.forms.viscous_matrix @ extended)[free]
        constraint = -(self.forms.divergence_matrix @ extended)
        interior, multiplier = self._stokes.solve(load, constraint)

        velocity = extended.copy()
        velocity[free] = interior
        return LiftedField(velocity=velocity, pressure=-multiplier, flux=flux)

    def leray_project(self, field: np.ndarray) -> np.ndarray:
        """Divergence-free part of a fluid field.

        Parameters
        ----------
        field : np.ndarray
            Component-blocked quadratic coefficients (2n,) or values at the
            quadrature points (n_cells, n_q, 2).

        Returns
        -------
        np.ndarray
            (n_cells, n_q, 2) values of v − ∇q, orthogonal to the gradient of
            every quadratic fluid field.
        """
        values = self.quadrature_values(field)
        q = self.gradient_potential(values)
        return values - self.spaces.fluid.evaluate_gradient(q)

    def gradient_potential(self, field: np.ndarray) -> np.ndarray:
        """Zero-mean q with ∇q the gradient part of field."""
        fluid = self.spaces.fluid
        values = self.quadrature_values(field)
        local = np.einsum("cq,cqd,cqad->ca", fluid.weights, values, fluid.gradients)
        rhs = fluid.assemble_vector(local)
        return self.solve_potential(rhs)[0]

    def quadrature_values(self, field: np.ndarray) -> np.ndarray:
        field = np.asarray(field, dtype=float)
        if field.ndim == 1:
            return self.spaces.fluid.evaluate_vector(field)
        return field

    def inner(self, a: np.ndarray, b: np.ndarray) -> float:
        """L² product of two fluid fields (coefficients or quadrature values)."""
        a, b = self.quadrature_values(a), self.quadrature_values(b)
        return float(np.einsum("cq,cqd,cqd->", self.spaces.fluid.weights, a, b))


@dataclass
class BlockSystem:
    """The coupled mass, stiffness and divergence constraint.

    The evolution reads 𝕄V′ = −KV − Bᵀp with BV = 0, where
    𝕄 = Tᵀ M_F T and K = Tᵀ K_F T, so the generator is 𝔸 = −K on the
    constrained subspace.

    Attributes
    ----------
    spaces, forms, rigid, operators
    prolongation : sp.csr_matrix
        T, (n_velocity, n_reduced), reduced coordinates to fluid velocity.
    M0 : sp.csr_matrix
        Block diagonal (fluid mass, M, M, I₀) on full states.
    added_mass : np.ndarray
        3×3 Galerkin matrix ∫∇q_i·∇q_j of the rigid generator potentials.
    potentials : np.ndarray
        (3, n_fluid) Neumann potentials of e₁, e₂ and the rotation.
    pencil : SaddlePencil
        Coupled 𝕄, K and B in reduced coordinates.
    """

    spaces: FunctionSpaces
    forms: FormLibrary
    rigid: RigidBodyData
    operators: FluidOperators
    prolongation: sp.csr_matrix
    M0: sp.csr_matrix
    added_mass: np.ndarray
    potentials: np.ndarray
    pencil: SaddlePencil

    @property
    def n_reduced(self) -> int:
        return self.pencil.size

    @property
    def n_full(self) -> int:
        return self.spaces.n_velocity + 3

    @property
    def n_free(self) -> int:
        return self.n_reduced - 3

    @property
    def mass(self) -> sp.csr_matrix:
        return self.pencil.mass

    @property
    def stiffness(self) -> sp.csr_matrix:
        return self.pencil.stiffness

    @property
    def A_block(self) -> sp.csr_matrix:
        """𝔸 = −K."""
        return -self.pencil.stiffness

    @property
    def constraint(self) -> sp.csr_matrix:
        return self.pencil.constraint

    @property
    def dimensions(self) -> Dict[str, int]:
        return {
            "velocity": self.spaces.n_velocity,
            "pressure": self.spaces.n_pressure,
            "reduced": self.n_reduced,
            "full": self.n_full,
            "solid": 2 * self.spaces.n_solid,
        }

    @cached_property
    def Madd(self) -> sp.csr_matrix:
        """Added mass on full states: zero fluid block, the 3×3 rigid block."""
        n = self.spaces.n_velocity
        return sp.block_diag((sp.csr_matrix((n, n)), self.added_mass)).tocsr()

    @cached_property
    def prolongation_full(self) -> sp.csr_matrix:
        """(n_full, n_reduced) map from reduced coordinates to full states."""
        rigid = sp.hstack(
            (sp.csr_matrix((3, self.n_free)), sp.identity(3, format="csr"))
        )
        return sp.vstack((self.prolongation, rigid)).tocsr()

    @cached_property
    def dirichlet_pencil(self) -> SaddlePencil:
        """The pencil with the solid held at rest (no-slip on the interface)."""
        free = slice(0, self.n_free)
        return SaddlePencil(
            stiffness=self.stiffness[free, free],
            mass=self.mass[free, free],
            constraint=self.constraint[:, free],
            pressure_mean=self.pencil.pressure_mean,
            tol=self.pencil.tol,
        )

    def full_state(self, reduced: np.ndarray, lifting: Optional[np.ndarray] = None):
        """Full state (fluid velocity, h′, ω); lifting adds a fluid field."""
        state = self.prolongation_full @ reduced
        if lifting is not None:
            state[: self.spaces.n_velocity] += lifting
        return state

    def reduce(self, state: np.ndarray) -> np.ndarray:
        """Reduced coordinates of a full state (interface values are dropped)."""
        free = self.spaces.interior_velocity_dofs
        return np.concatenate((state[free], state[-3:]))

    def energy(self, reduced: np.ndarray) -> float:
        return 0.5 * float(reduced @ (self.mass @ reduced))

    def dissipation(self, reduced: np.ndarray) -> float:
        """2ν‖D(u)‖² of the fluid velocity of a reduced state."""
        return float(reduced @ (self.stiffness @ reduced))

    def apply_generator(self, reduced: np.ndarray) -> np.ndarray:
        """𝒜V: solves 𝕄Y + Bᵀp = −KV, BY = 0."""
        return self.pencil.factor(0.0, 1.0).solve(-(self.stiffness @ reduced))[0]

    def project_compatible(self, reduced: np.ndarray) -> np.ndarray:
        """𝕄-orthogonal projection onto discretely divergence-free states."""
        return self.pencil.factor(0.0, 1.0).solve(self.mass @ reduced)[0]

    def divergence_residual(self, reduced: np.ndarray) -> float:
        return float(np.linalg.norm(self.constraint @ reduced))

    def shifted_pairing(self, states: np.ndarray, shift: float) -> np.ndarray:
        """Gram matrix ⟨(shift·𝕄 − 𝔸)Vᵢ, Vⱼ⟩ of the columns of states.

        Evaluated on the prolonged fluid velocity with the unreduced fluid
        forms, so it does not see the symmetrized reduced blocks.
        """
        forms = self.forms
        velocity = self.prolongation @ states
        fluid = shift * forms.mass_matrix + forms.viscous_matrix
        rigid = states[-3:]
        return np.asarray(velocity.T @ (fluid @ velocity)) + shift * (
            rigid.T @ (self.rigid.diagonal[:, None] * rigid)
        )

    def added_mass_energy(self, rigid) -> float:
        """∫|∇q|² over the fluid for the potential of the datum (h′₁, h′₂, ω)."""
        solution = self.operators.solve_neumann(rigid)
        gradient = self.spaces.fluid.evaluate_gradient(solution.potential)
        return self.operators.inner(gradient, gradient)

    def asymmetry(self, shift: float) -> float:
        """Relative asymmetry of λ𝕄 − 𝔸."""
        matrix = shift * self.mass + self.stiffness
        norm = sparse_norm(matrix)
        return float(sparse_norm(matrix - matrix.T) / norm) if norm else 0.0

    def steady_response(self, values: np.ndarray, shift: float) -> np.ndarray:
        """Full steady state of the shifted system driven by an interface datum.

        Finds X with trace h′ + ω∧y + ζ on the interface solving
        Tᵀ(K_F − shift·M_F)X + Bᵀp = 0 and D X = 0, starting from the trivial
        (interface only) extension of ζ.
        """
        extension = self.spaces.extend_interface(np.asarray(values, dtype=float))
        operator = self.forms.viscous_matrix - shift * self.forms.mass_matrix
        load = -(self.prolongation.T @ (operator @ extension))
        constraint = -(self.forms.divergence_matrix @ extension)
        solver = self.pencil.factor(1.0, -shift)
        reduced, _ = solver.solve(load, constraint)
        return self.full_state(reduced, extension)

    def added_mass_crosscheck(self) -> np.ndarray:
        """3×3 boundary-integral matrix [𝒞N, 𝒞N̂; 𝒞̂N, 𝒞̂N̂]."""
        return np.column_stack(
            [self.operators.boundary_integrals(q) for q in self.potentials]
        )

    def gradient_part_defect(self, velocity: np.ndarray) -> float:
        """‖(I−P)u − (I−P)L(u|∂𝒮)‖/‖u‖, L the Stokes lifting of the trace."""
        operators = self.operators
        lifted = operators.lift_stokes(
            self.spaces.interface_values(velocity), check_flux=False
        )
        gap = operators.gradient_potential(velocity) - operators.gradient_potential(
            lifted.velocity
        )
        norm = np.sqrt(operators.inner(velocity, velocity))
        if norm == 0.0:
            return 0.0
        return float(np.sqrt(gap @ (self.forms.scalar_stiffness @ gap)) / norm)

    def effective_mass_defect(self, reduced: np.ndarray) -> float:
        """Relative gap between the kinetic energy of a coupled state and
        ‖Pu‖² + (h′,ω)ᵀ(M₀ + Madd)(h′,ω)."""
        velocity = self.prolongation @ reduced
        rigid = reduced[-3:]
        total = 2.0 * self.energy(reduced)
        projected = self.operators.leray_project(velocity)
        split = self.operators.inner(projected, projected) + rigid @ (
            (np.diag(self.rigid.diagonal) + self.added_mass) @ rigid
        )
        return abs(total - split) / total if total else 0.0


def assemble_block_system(
    spaces: FunctionSpaces,
    forms: FormLibrary,
    rigid: RigidBodyData,
    operators: Optional[FluidOperators] = None,
    tol: float = SOLVER_TOLERANCE,
) -> BlockSystem:
    """Assembles the coupled system and the added mass.

    Parameters
    ----------
    spaces : FunctionSpaces
    forms : FormLibrary
    rigid : RigidBodyData
    operators : Optional[FluidOperators]
        Reused if given, so factorizations are shared.
    tol : float
        Backward error accepted from the linear solves.

    Returns
    -------
    BlockSystem
    """
    operators = FluidOperators(spaces, forms, tol) if operators is None else operators
    n = spaces.n_velocity
    free = spaces.interior_velocity_dofs
    selection = sp.csr_matrix(
        (np.ones(len(free)), (free, np.arange(len(free)))), shape=(n, len(free))
    )
    prolongation = sp.hstack((selection, forms.rigid_trace)).tocsr()

    rigid_mass = sp.diags(rigid.diagonal)
    reduced_rigid = sp.block_diag((sp.csr_matrix((len(free), len(free))), rigid_mass))
    mass = (prolongation.T @ forms.mass_matrix @ prolongation + reduced_rigid).tocsr()
    stiffness = (prolongation.T @ forms.viscous_matrix @ prolongation).tocsr()
    constraint = (forms.divergence_matrix @ prolongation).tocsr()
    mass = 0.5 * (mass + mass.T)
    stiffness = 0.5 * (stiffness + stiffness.T)

    solutions = [operators.solve_neumann(e) for e in np.eye(3)]
    potentials = np.array([s.potential for s in solutions])
    added_mass = potentials @ (forms.scalar_stiffness @ potentials.T)
    added_mass = 0.5 * (added_mass + added_mass.T)

    blocks = BlockSystem(
        spaces=spaces,
        forms=forms,
        rigid=rigid,
        operators=operators,
        prolongation=prolongation,
        M0=sp.block_diag((forms.mass_matrix, rigid_mass)).tocsr(),
        added_mass=added_mass,
        potentials=potentials,
        pencil=SaddlePencil(
            stiffness, mass, constraint, forms.pressure_mean, tol=tol
        ),
    )
    logger.info(
        "block system: %d reduced unknowns, %d constraints",
        blocks.n_reduced,
        spaces.n_pressure,
    )
    logger.debug("added mass:\n%s", np.array2string(added_mass, precision=6))
    return blocks

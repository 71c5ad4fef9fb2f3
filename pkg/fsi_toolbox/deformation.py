"""Admissible internal deformations of the solid generated by a boundary control.

The solid velocity φ solves μφ − 2 div D(φ) = F(φ) in 𝒮 with φ = ζ on ∂𝒮, where
F(φ) is the rigid field built from the boundary traction moments of φ. The
traction moments c = (∫2D(φ)n, ∫y∧2D(φ)n) are evaluated by the discrete Green
formula, so the fixed point is reached exactly when φ carries neither linear
nor angular momentum. The deformation itself is X*(y, t) = y + ∫₀ᵗ e^{−λs}φ(y, s) ds.
"""
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import scipy.sparse as sp
from scipy.integrate import cumulative_trapezoid
from scipy.sparse.linalg import eigsh, splu

from .classes import FixedPointDivergence, FluxViolation, GridMismatch, NonConvergence
from .coupled_operators import FLUX_TOLERANCE
from .discretization import FormLibrary, FunctionSpaces, rigid_field
from .exporters import write_json, write_table
from .geometry import RigidBodyData

logger = logging.getLogger(__name__)

RESIDUAL_TOLERANCE = 1e-8
MAX_ITERATIONS = 200
STALL_LIMIT = 5
PENALTY_FACTOR = 20.0
MAX_PENALTY_DOUBLINGS = 10


@dataclass(frozen=True)
class SolidVelocityField:
    """Solution φ of the nonlocal elliptic problem for one boundary datum.

    Attributes
    ----------
    phi : np.ndarray
        Component-blocked quadratic field on the solid.
    mu : float
        Penalty μ the solve converged with.
    traction : np.ndarray
        Traction moments (c₁, c₂, c_ω) defining the rigid force F(φ).
    residuals : List[float]
        Fixed-point residual history; empty for the bordered solve.
    """

    phi: np.ndarray
    mu: float
    traction: np.ndarray
    residuals: List[float] = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return len(self.residuals)


@dataclass(frozen=True)
class ConstraintReport:
    """Boundary flux, linear and angular momentum of a series of solid fields.

    Attributes
    ----------
    flux : np.ndarray
        |∫_{∂𝒮} φ·n| per snapshot.
    linear : np.ndarray
        |∫_𝒮 φ| per snapshot.
    angular : np.ndarray
        |∫_𝒮 y∧φ| per snapshot.
    tolerances : np.ndarray
        10·h²·‖φ‖ per snapshot.
    """

    flux: np.ndarray
    linear: np.ndarray
    angular: np.ndarray
    tolerances: np.ndarray

    @property
    def maxima(self) -> Dict[str, float]:
        return {
            name: float(getattr(self, name).max(initial=0.0))
            for name in ("flux", "linear", "angular")
        }

    @property
    def violations(self) -> Dict[str, np.ndarray]:
        """Snapshot indices failing each constraint."""
        return {
            name: np.flatnonzero(getattr(self, name) > self.tolerances)
            for name in ("flux", "linear", "angular")
        }

    @property
    def admissible(self) -> bool:
        return not any(len(v) for v in self.violations.values())

    def to_dict(self) -> Dict:
        return {
            "admissible": self.admissible,
            "maxima": self.maxima,
            "snapshots": [
                {"flux": f, "linear": l, "angular": a, "tolerance": t}
                for f, l, a, t in zip(
                    self.flux, self.linear, self.angular, self.tolerances
                )
            ],
        }

    def to_json(self, path: Union[Path, str]):
        write_json(path, self.to_dict())


@dataclass(frozen=True)
class DeformationTrajectory:
    """Snapshots of X*(·, t_k) on the solid.

    Attributes
    ----------
    times : np.ndarray
    displacements : np.ndarray
        (n_snapshots, 2·n_solid) values of X*(y, t_k) − y.
    decay_rate : float
    vertex_ids : np.ndarray
        Mesh ids of the solid vertices (the first solid dofs).
    """

    times: np.ndarray
    displacements: np.ndarray
    decay_rate: float
    vertex_ids: np.ndarray

    def positions(self, points: np.ndarray, index: int) -> np.ndarray:
        """X*(y, t_index) at the solid dof points."""
        n = len(points)
        shift = self.displacements[index]
        return points + np.column_stack((shift[:n], shift[n:]))

    def vertex_displacement(self, index: int) -> np.ndarray:
        """(n_vertices, 2) displacement of the solid mesh vertices."""
        shift = self.displacements[index]
        n = len(shift) // 2
        m = len(self.vertex_ids)
        return np.column_stack((shift[:m], shift[n : n + m]))

    def to_csv(self, directory: Union[Path, str]):
        """Writes one ``vertex_id, dx, dy`` table per snapshot."""
        directory = Path(directory)
        for k in range(len(self.times)):
            write_table(
                directory / f"displacement_{k:03d}.csv",
                ["vertex_id", "dx", "dy"],
                np.column_stack((self.vertex_ids, self.vertex_displacement(k))),
            )


class DeformationSolver:
    """Solves for solid velocities generated by boundary controls.

    Parameters
    ----------
    spaces : FunctionSpaces
    forms : FormLibrary
    rigid : RigidBodyData
    mu : Optional[float]
        Penalty; 20 times the smallest Dirichlet Laplacian eigenvalue of the
        solid by default.
    """

    def __init__(
        self,
        spaces: FunctionSpaces,
        forms: FormLibrary,
        rigid: RigidBodyData,
        mu: Optional[float] = None,
    ):
        self.spaces = spaces
        self.forms = forms
        self.rigid = rigid
        self.mu = PENALTY_FACTOR * self.poincare_eigenvalue if mu is None else mu
        if not self.mu > 0.0:
            raise ValueError(f"penalty must be positive, got {self.mu}")
        self._factors = {}

    @cached_property
    def boundary(self) -> np.ndarray:
        n = self.spaces.n_solid
        dofs = self.spaces.solid_boundary_dofs
        return np.concatenate((dofs, n + dofs))

    @cached_property
    def interior(self) -> np.ndarray:
        n = self.spaces.n_solid
        dofs = self.spaces.solid_interior_dofs
        return np.concatenate((dofs, n + dofs))

    @cached_property
    def rigid_modes(self) -> np.ndarray:
        """(2·n_solid, 3) nodal values of e₁, e₂ and ω∧y."""
        generators = rigid_field(self.spaces.solid.points)
        return np.vstack((generators[:, 0, :], generators[:, 1, :]))

    @cached_property
    def moment_rows(self) -> np.ndarray:
        """(3, 2·n_solid) rows of φ ↦ (∫φ₁, ∫φ₂, ∫y∧φ)."""
        return np.asarray((self.forms.solid_mass @ self.rigid_modes).T)

    @cached_property
    def force_scale(self) -> np.ndarray:
        """(ρ_S/M, ρ_S/M, ρ_S/I₀), the density of F per unit traction moment."""
        rho = self.rigid.density
        return rho / np.array([self.rigid.mass, self.rigid.mass, self.rigid.inertia])

    @cached_property
    def force_columns(self) -> np.ndarray:
        """(2·n_solid, 3) load vectors of F for unit traction moments."""
        return self.moment_rows.T * self.force_scale

    @cached_property
    def poincare_eigenvalue(self) -> float:
        """Smallest eigenvalue of the Dirichlet Laplacian on the solid."""
        inner = self.spaces.solid_interior_dofs
        stiffness = self.forms.solid_stiffness[inner][:, inner].tocsc()
        mass = self.forms.solid_scalar_mass[inner][:, inner].tocsc()
        value = eigsh(stiffness, k=1, M=mass, sigma=0.0, which="LM")[0][0]
        logger.debug("solid Dirichlet eigenvalue %.6g", value)
        return float(value)

    def operator(self, mu: float) -> sp.csr_matrix:
        return (mu * self.forms.solid_mass + self.forms.solid_strain).tocsr()

    def _factor(self, mu: float):
        if mu not in self._factors:
            inner = self.interior
            self._factors[mu] = splu(self.operator(mu)[inner][:, inner].tocsc())
        return self._factors[mu]

    def boundary_values(self, values: np.ndarray) -> np.ndarray:
        """Solid boundary dofs of an interface datum ordered as interface_dofs."""
        values = np.asarray(values, dtype=float)
        return np.concatenate((values[:, 0], values[:, 1]))

    def check_flux(self, values: np.ndarray):
        extended = self.spaces.extend_interface(np.asarray(values, dtype=float))
        flux = self.forms.boundary_flux @ extended
        scale = np.abs(self.forms.boundary_flux) @ np.abs(extended)
        if abs(flux) > FLUX_TOLERANCE * max(scale, np.finfo(float).tiny):
            raise FluxViolation(f"boundary datum has net flux {flux:.3e}")

    def _assemble(self, boundary: np.ndarray, interior: np.ndarray) -> np.ndarray:
        phi = np.zeros(2 * self.spaces.n_solid)
        phi[self.boundary] = boundary
        phi[self.interior] = interior
        return phi

    def solve_lame_fixed_point(
        self, values: np.ndarray, mu: Optional[float] = None
    ) -> SolidVelocityField:
        """Fixed-point solve for the boundary datum values.

        Each iteration solves the μ-shifted elliptic problem with the force of
        the previous traction moments frozen, then updates the moments by the
        discrete Green formula. The penalty is doubled whenever the iteration
        stalls.

        Parameters
        ----------
        values : np.ndarray
            (n_interface_dofs, 2) datum ζ.
        mu : Optional[float]
            Starting penalty, the solver default otherwise.

        Returns
        -------
        SolidVelocityField

        Raises
        ------
        FluxViolation
            Raised if ζ carries net flux through ∂𝒮.
        FixedPointDivergence
            Raised if doubling the penalty never restores a contraction.
        """
        self.check_flux(values)
        mu = self.mu if mu is None else float(mu)
        for _ in range(MAX_PENALTY_DOUBLINGS):
            try:
                return self._iterate(values, mu)
            except FixedPointDivergence as ex:
                logger.warning("%s; doubling the penalty to %.4g", ex, 2.0 * mu)
                mu *= 2.0
        raise FixedPointDivergence(f"no contraction up to penalty {mu:.4g}")

    def _iterate(self, values: np.ndarray, mu: float) -> SolidVelocityField:
        boundary = self.boundary_values(values)
        operator = self.operator(mu)
        lu = self._factor(mu)
        dirichlet_load = -(operator[self.interior][:, self.boundary] @ boundary)
        forces = self.force_columns[self.interior]

        traction = np.zeros(3)
        residuals, first_step, stalled = [], None, 0
        for iteration in range(MAX_ITERATIONS):
            phi = self._assemble(boundary, lu.solve(dirichlet_load + forces @ traction))
            step = -mu * (self.moment_rows @ phi)
            traction = traction + step
            size = np.linalg.norm(step)
            if first_step is None:
                first_step = size
            if first_step == 0.0:
                residuals.append(0.0)
                break
            residual = size / max(np.linalg.norm(traction), first_step)
            if residuals and residual >= residuals[-1]:
                stalled += 1
                if stalled >= STALL_LIMIT:
                    raise FixedPointDivergence(
                        f"fixed point stalled at residual {residual:.3e} (mu={mu:.4g})"
                    )
            else:
                stalled = 0
            residuals.append(residual)
            if residual <= RESIDUAL_TOLERANCE:
                break
        else:
            raise NonConvergence(
                f"fixed point residual {residuals[-1]:.3e} after {MAX_ITERATIONS} steps"
            )
        phi = self._assemble(boundary, lu.solve(dirichlet_load + forces @ traction))
        logger.debug(
            "fixed point: %d iterations, residual %.2e", iteration + 1, residuals[-1]
        )
        return SolidVelocityField(
            phi=phi, mu=mu, traction=traction, residuals=residuals
        )

    def solve_bordered(
        self, values: np.ndarray, mu: Optional[float] = None
    ) -> SolidVelocityField:
        """Direct solve with the three traction moments as extra unknowns.

        The momentum constraints close the system, which the fixed point
        reaches only in the limit.
        """
        self.check_flux(values)
        mu = self.mu if mu is None else float(mu)
        boundary = self.boundary_values(values)
        inner, edge = self.interior, self.boundary
        operator = self.operator(mu)
        rows = sp.csr_matrix(self.moment_rows)
        matrix = sp.bmat(
            [
                [operator[inner][:, inner], sp.csr_matrix(-self.force_columns[inner])],
                [rows[:, inner], None],
            ]
        ).tocsc()
        rhs = np.concatenate(
            (-(operator[inner][:, edge] @ boundary), -(rows[:, edge] @ boundary))
        )
        solution = splu(matrix).solve(rhs)
        phi = self._assemble(boundary, solution[: len(inner)])
        return SolidVelocityField(phi=phi, mu=mu, traction=solution[len(inner) :])

    def solve_modes(self, values: Sequence[np.ndarray]) -> List[SolidVelocityField]:
        """Fixed-point solution for every interface datum (e.g. control modes)."""
        return [self.solve_lame_fixed_point(v) for v in values]

    def snapshot(
        self, modes: Sequence[SolidVelocityField], coefficients: np.ndarray
    ) -> np.ndarray:
        """φ for the datum Σ_j coefficients_j ζ_j, by superposition."""
        fields = np.array([mode.phi for mode in modes])
        return np.asarray(coefficients, dtype=float) @ fields

    def constraint_values(self, phi: np.ndarray) -> np.ndarray:
        """(flux, |∫φ|, |∫y∧φ|) of a solid field."""
        trace = phi[self.boundary]
        n = len(trace) // 2
        flux = self.forms.boundary_flux @ self.spaces.extend_interface(
            np.column_stack((trace[:n], trace[n:]))
        )
        moments = self.moment_rows @ phi
        return np.array(
            [abs(flux), np.linalg.norm(moments[:2]), abs(moments[2])]
        )

    def constraint_tolerance(self, phi: np.ndarray) -> float:
        h = self.spaces.mesh.mesh_size
        return 10.0 * h**2 * self.l2_norm(phi)

    def l2_norm(self, phi: np.ndarray) -> float:
        return float(np.sqrt(phi @ (self.forms.solid_mass @ phi)))

    def h1_norm(self, phi: np.ndarray) -> float:
        laplacian = self.forms.solid_vector_laplacian
        return float(np.sqrt(phi @ (laplacian @ phi) + self.l2_norm(phi) ** 2))

    def harmonic_extension(self, values: np.ndarray) -> np.ndarray:
        """Componentwise discrete harmonic extension of an interface datum."""
        boundary = self.boundary_values(values)
        laplacian = self.forms.solid_vector_laplacian
        inner, edge = self.interior, self.boundary
        interior = splu(laplacian[inner][:, inner].tocsc()).solve(
            -(laplacian[inner][:, edge] @ boundary)
        )
        return self._assemble(boundary, interior)

    def korn_gap(self, phi: np.ndarray) -> float:
        """2‖D(φ)‖² − ‖∇φ‖², non-negative for fields vanishing on ∂𝒮."""
        strain = phi @ (self.forms.solid_strain @ phi)
        gradient = phi @ (self.forms.solid_vector_laplacian @ phi)
        return float(strain - gradient)

    def norm_ratio(self, solution: SolidVelocityField, values: np.ndarray) -> float:
        """‖φ‖_{H¹(𝒮)} over the H¹ norm of the harmonic extension of ζ."""
        reference = self.h1_norm(self.harmonic_extension(values))
        return self.h1_norm(solution.phi) / reference if reference else 0.0

    def force_work(self, traction: np.ndarray, phi: np.ndarray) -> float:
        """∫_𝒮 F·φ for the rigid force of the given traction moments."""
        return float((self.force_columns @ traction) @ phi)

    def work_ratio(self, solution: SolidVelocityField) -> float:
        """|∫_𝒮 F·φ| in units of the work left by a converged fixed point.

        The moments of φ equal the next traction step over μ, so a solve
        stopped at RESIDUAL_TOLERANCE leaves at most
        RESIDUAL_TOLERANCE·|F moments|·|traction|/μ of work.
        """
        traction = solution.traction
        scale = np.linalg.norm(self.force_scale * traction) * np.linalg.norm(traction)
        if scale == 0.0:
            return 0.0
        work = abs(self.force_work(traction, solution.phi))
        return float(work * solution.mu / scale)


def check_admissibility(
    solver: DeformationSolver, fields: Sequence[np.ndarray]
) -> ConstraintReport:
    """Reports the three linearized constraints for every snapshot.

    Parameters
    ----------
    solver : DeformationSolver
    fields : Sequence[np.ndarray]
        Solid fields φ (or SolidVelocityField instances).

    Returns
    -------
    ConstraintReport
    """
    fields = [f.phi if isinstance(f, SolidVelocityField) else f for f in fields]
    values = np.array([solver.constraint_values(f) for f in fields]).reshape(-1, 3)
    tolerances = np.array([solver.constraint_tolerance(f) for f in fields])
    report = ConstraintReport(
        flux=values[:, 0],
        linear=values[:, 1],
        angular=values[:, 2],
        tolerances=tolerances,
    )
    if not report.admissible:
        logger.warning("constraint violations: %s", report.violations)
    return report


def integrate_deformation(
    times: np.ndarray,
    fields: np.ndarray,
    decay_rate: float,
    vertex_ids: Optional[np.ndarray] = None,
) -> DeformationTrajectory:
    """X*(y, t_k) − y = ∫₀^{t_k} e^{−λs}φ(y, s) ds by the trapezoid rule.

    Parameters
    ----------
    times : np.ndarray
        Uniform sample times, the first one being t = 0.
    fields : np.ndarray
        (n_samples, 2·n_solid) solid velocities φ(t_k).
    decay_rate : float
        λ > 0.
    vertex_ids : Optional[np.ndarray]
        Mesh ids of the solid vertices, for export.

    Returns
    -------
    DeformationTrajectory

    Raises
    ------
    GridMismatch
        Raised if the sample times are not uniform and increasing or do not
        match the samples.
    """
    times = np.asarray(times, dtype=float)
    fields = np.atleast_2d(np.asarray(fields, dtype=float))
    if not decay_rate > 0.0:
        raise ValueError(f"decay rate must be positive, got {decay_rate}")
    if len(times) != len(fields):
        raise GridMismatch(f"{len(times)} times for {len(fields)} samples")
    if len(times) > 1:
        steps = np.diff(times)
        if np.any(steps <= 0.0) or not np.allclose(steps, steps[0], rtol=1e-9):
            raise GridMismatch("sample times are not uniform")

    weights = np.exp(-decay_rate * times)
    if len(times) > 1:
        displacements = cumulative_trapezoid(
            weights[:, None] * fields, times, axis=0, initial=0.0
        )
    else:
        displacements = np.zeros_like(fields)
    if vertex_ids is None:
        vertex_ids = np.arange(0)
    return DeformationTrajectory(
        times=times,
        displacements=displacements,
        decay_rate=float(decay_rate),
        vertex_ids=np.asarray(vertex_ids),
    )

"""Boundary control basis, projected input, controllability and the Riccati
feedback.

The feedback is designed on the modal coordinates a = Φᵀ𝕄V of the unstable
eigenvectors Φ. The controlled fluid velocity is u = TV + Wz, with W the Stokes
liftings of the control modes and z their coefficients, and the gain acts on
full states so that z = K_u Φ_Fᵀ M_F X.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.linalg as la

from .classes import ModeFamily, RiccatiNoSolution
from .coupled_operators import BlockSystem, FluidOperators
from .exporters import write_json
from .spectral import UnstableSubspace

logger = logging.getLogger(__name__)

FLUX_FREE_TOLERANCE = 1e-10
GRAM_CONDITION_LIMIT = 1e6
RANK_TOLERANCE = 1e-10
PBH_TOLERANCE = 1e-8


@dataclass(frozen=True)
class ControlBasis:
    """Flux-free interface velocity modes and their Stokes liftings.

    Attributes
    ----------
    values : np.ndarray
        (m, n_interface_dofs, 2) mode values at the interface dofs.
    labels : List[str]
    liftings : np.ndarray
        (n_velocity, m) lifted fluid velocities.
    pressures : np.ndarray
        (n_pressure, m) lifting pressures.
    fluxes : np.ndarray
        (m,) net interface flux of each mode.
    gram : np.ndarray
        (m, m) interface L² Gram matrix.
    """

    values: np.ndarray
    labels: List[str]
    liftings: np.ndarray
    pressures: np.ndarray
    fluxes: np.ndarray
    gram: np.ndarray

    @property
    def dimension(self) -> int:
        return len(self.labels)

    @property
    def gram_condition(self) -> float:
        return float(np.linalg.cond(self.gram)) if self.dimension else 1.0

    def interface_field(self, coefficients: np.ndarray) -> np.ndarray:
        """(n_interface_dofs, 2) values of Σ c_j ξ_j."""
        return np.einsum("j,jid->id", np.asarray(coefficients), self.values)

    def lifting(self, coefficients: np.ndarray) -> np.ndarray:
        return self.liftings @ np.asarray(coefficients)

    def combine(self, weights: np.ndarray, labels: Sequence[str]) -> "ControlBasis":
        """Basis of the modes Σ_j weights[j, k] ξ_j."""
        return ControlBasis(
            values=np.einsum("jk,jid->kid", weights, self.values),
            labels=list(labels),
            liftings=self.liftings @ weights,
            pressures=self.pressures @ weights,
            fluxes=self.fluxes @ weights,
            gram=weights.T @ self.gram @ weights,
        )


def _candidates(frame: Dict[str, np.ndarray], family: ModeFamily) -> Iterator:
    theta, normal, tangent = frame["theta"], frame["normal"], frame["tangent"]
    yield "spin", tangent
    if family is ModeFamily.TRIGONOMETRIC:
        yield "normal", normal
    k = 1
    while True:
        cos, sin = np.cos(k * theta)[:, None], np.sin(k * theta)[:, None]
        if family is ModeFamily.TRIGONOMETRIC:
            yield f"cos{k}-normal", cos * normal
            yield f"sin{k}-normal", sin * normal
        yield f"cos{k}-tangent", cos * tangent
        yield f"sin{k}-tangent", sin * tangent
        k += 1


def build_control_basis(
    operators: FluidOperators,
    m: int,
    family: ModeFamily = ModeFamily.TRIGONOMETRIC,
) -> ControlBasis:
    """First m admissible trigonometric interface modes.

    Candidates whose discrete flux is not at discretization level are skipped;
    the others have their normal component adjusted so that the discrete flux
    vanishes.

    Parameters
    ----------
    operators : FluidOperators
    m : int
        Number of modes, at least 1.
    family : ModeFamily

    Returns
    -------
    ControlBasis
    """
    if m < 1:
        raise ValueError(f"the control basis needs at least one mode, got {m}")
    spaces = operators.spaces
    frame = spaces.interface_frame
    threshold = max(10.0 * spaces.mesh.mesh_size**2, 1e-8)
    normal_flux = operators.interface_flux(frame["normal"])

    labels, modes = [], []
    for label, values in _candidates(frame, family):
        if len(modes) == m:
            break
        extended = spaces.extend_interface(values)
        flux = operators.interface_flux(values)
        scale = float(np.abs(operators.forms.boundary_flux) @ np.abs(extended))
        if abs(flux) > threshold * scale:
            logger.debug("mode %s skipped, flux %.3e", label, flux)
            continue
        values = values - (flux / normal_flux) * frame["normal"]
        residual = operators.interface_flux(values)
        if abs(residual) > FLUX_FREE_TOLERANCE * max(scale, 1.0):
            raise ValueError(f"mode {label} keeps a flux of {residual:.3e}")
        labels.append(label)
        modes.append(values)

    lifted = [operators.lift_stokes(values) for values in modes]
    gram = np.array([[operators.interface_inner(a, b) for b in modes] for a in modes])
    basis = ControlBasis(
        values=np.array(modes),
        labels=labels,
        liftings=np.column_stack([f.velocity for f in lifted]),
        pressures=np.column_stack([f.pressure for f in lifted]),
        fluxes=np.array([f.flux for f in lifted]),
        gram=gram,
    )
    if basis.gram_condition > GRAM_CONDITION_LIMIT:
        logger.warning(
            "control modes are nearly dependent, Gram condition %.2e",
            basis.gram_condition,
        )
    logger.info("control basis: %s", ", ".join(labels))
    return basis


def assemble_B(basis: ControlBasis, blocks: BlockSystem, decay_rate: float):
    """Injection of the shifted system, one column per control mode.

    Column j is Tᵀ(λ M_F − K_F) w_j for the lifting w_j of mode j.

    Returns
    -------
    np.ndarray
        (n_reduced, m)
    """
    operator = decay_rate * blocks.forms.mass_matrix - blocks.forms.viscous_matrix
    return np.asarray(blocks.prolongation.T @ (operator @ basis.liftings))


def lifting_mass(basis: ControlBasis, blocks: BlockSystem) -> np.ndarray:
    """Tᵀ M_F W, the λ-derivative of assemble_B."""
    return np.asarray(
        blocks.prolongation.T @ (blocks.forms.mass_matrix @ basis.liftings)
    )


def projected_input(
    subspace: UnstableSubspace,
    injection: np.ndarray,
    basis: ControlBasis,
    blocks: BlockSystem,
) -> np.ndarray:
    """Input matrix of the unstable modal coordinates.

    The state is measured including the lifted control, a = Φ_Fᵀ M_F X. Its
    shifted equation is a′ = (Λ+λ)a + B_u z with
    B_u = Φᵀ B_λ − (Λ+λ) Φᵀ Tᵀ M_F W.

    Returns
    -------
    np.ndarray
        (N, m)
    """
    phi = subspace.basis
    coupling = phi.T @ lifting_mass(basis, blocks)
    shifted = subspace.eigenvalues + subspace.decay_rate
    return phi.T @ injection - shifted[:, None] * coupling


@dataclass(frozen=True)
class ControllabilityReport:
    """Kalman and Hautus tests of the projected pair.

    Attributes
    ----------
    dimension : int
        N.
    rank : int
        Rank of the Kalman matrix.
    controllable : bool
        rank == N.
    singular_values : np.ndarray
    pbh_ranks : np.ndarray
        rank [A − sI, B] for every eigenvalue s.
    """

    dimension: int
    rank: int
    controllable: bool
    singular_values: np.ndarray
    pbh_ranks: np.ndarray

    @property
    def pbh_controllable(self) -> bool:
        return bool(np.all(self.pbh_ranks == self.dimension))

    def to_dict(self) -> Dict:
        return {
            "N": self.dimension,
            "rank": self.rank,
            "controllable": self.controllable,
            "pbh_controllable": self.pbh_controllable,
            "singular_values": self.singular_values,
            "pbh_ranks": self.pbh_ranks,
        }


def _state_matrix(eigenvalues: np.ndarray, decay_rate: float) -> np.ndarray:
    return np.diag(np.asarray(eigenvalues, dtype=float) + decay_rate)


def kalman_rank(state: np.ndarray, inputs: np.ndarray) -> Tuple[int, np.ndarray]:
    """Rank and singular values of [B, AB, …, A^{N−1}B], A rescaled to unit
    norm."""
    n = state.shape[0]
    if n == 0:
        return 0, np.zeros(0)
    scale = max(np.abs(state).max(), np.finfo(float).tiny)
    scaled = state / scale
    blocks, current = [], inputs
    for _ in range(n):
        blocks.append(current)
        current = scaled @ current
    singular = la.svdvals(np.hstack(blocks))
    if singular.size == 0 or singular[0] == 0.0:
        return 0, singular
    return int(np.sum(singular > RANK_TOLERANCE * singular[0])), singular


def project_and_check_controllability(
    subspace: UnstableSubspace, inputs: np.ndarray
) -> ControllabilityReport:
    """Rank report of the projected pair (Λ + λ, B_u)."""
    n = subspace.dimension
    state = _state_matrix(subspace.eigenvalues, subspace.decay_rate)
    rank, singular = kalman_rank(state, inputs)

    pbh = []
    scale = max(np.abs(state).max(initial=0.0), np.abs(inputs).max(initial=0.0), 1e-300)
    for s in np.diag(state):
        pencil = np.hstack((state - s * np.eye(n), inputs))
        values = la.svdvals(pencil) if pencil.size else np.zeros(0)
        pbh.append(int(np.sum(values > PBH_TOLERANCE * scale)))
    report = ControllabilityReport(
        dimension=n,
        rank=rank,
        controllable=rank == n,
        singular_values=singular,
        pbh_ranks=np.array(pbh, dtype=int),
    )
    if not report.controllable:
        logger.warning("projected system is not controllable: rank %d < %d", rank, n)
    else:
        logger.info("Kalman rank %d of %d", rank, n)
    return report


def obstruction_basis(
    basis: ControlBasis, inputs: np.ndarray, rows: Optional[Sequence[int]] = None
) -> ControlBasis:
    """Combinations of the modes that no selected unstable mode can see.

    The rows of B_u are the adjoint boundary tractions of the unstable
    eigenmodes tested against the control modes; the returned modes span the
    null space of the selected rows. By default the leading min(N, m−1) rows
    are used.
    """
    n, m = inputs.shape
    rows = list(range(min(n, m - 1))) if rows is None else list(rows)
    weights = la.null_space(inputs[rows]) if rows else np.eye(m)
    if weights.shape[1] == 0:
        raise ValueError("the selected tractions leave no admissible mode")
    labels = [f"obstruction{k}" for k in range(weights.shape[1])]
    return basis.combine(weights, labels)


@dataclass(frozen=True)
class FeedbackGain:
    """Solution of the projected Riccati equation and the feedback it defines.

    Attributes
    ----------
    decay_rate : float
    riccati_solution : np.ndarray
        Π_u, (N, N) symmetric positive semidefinite.
    modal_gain : np.ndarray
        K_u = −B_uᵀΠ_u, (m, N).
    closed_loop_poles : np.ndarray
        Eigenvalues of Λ − B_uB_uᵀΠ_u.
    riccati_residual : float
        Normalized residual of the Riccati equation.
    state_projection : Optional[np.ndarray]
        (N, n_full) Φ_Fᵀ M_F; full states to modal coordinates.
    """

    decay_rate: float
    riccati_solution: np.ndarray
    modal_gain: np.ndarray
    closed_loop_poles: np.ndarray
    riccati_residual: float
    state_projection: Optional[np.ndarray] = None

    @property
    def dimension(self) -> int:
        return self.riccati_solution.shape[0]

    @property
    def n_controls(self) -> int:
        return self.modal_gain.shape[0]

    @property
    def gain_matrix(self) -> np.ndarray:
        """(m, n_full) 𝒦_λ acting on full states."""
        if self.state_projection is None:
            return self.modal_gain
        return self.modal_gain @ self.state_projection

    def __call__(self, state: np.ndarray) -> np.ndarray:
        """Control coefficients for a full state."""
        if self.dimension == 0:
            return np.zeros(self.n_controls)
        if self.state_projection is None:
            return self.modal_gain @ state
        return self.modal_gain @ (self.state_projection @ state)

    def to_dict(self) -> Dict:
        return {
            "lambda": self.decay_rate,
            "N": self.dimension,
            "m": self.n_controls,
            "riccati_residual": self.riccati_residual,
            "closed_loop_poles": [[p.real, p.imag] for p in self.closed_loop_poles],
            "riccati_solution": self.riccati_solution,
            "modal_gain": self.modal_gain,
            "gain_matrix": self.gain_matrix,
        }

    def to_json(self, path: Union[Path, str]):
        write_json(path, self.to_dict())


def riccati_residual(state, inputs, solution) -> float:
    """‖ΠA + AᵀΠ − ΠBBᵀΠ + I‖ normalized by the size of its terms."""
    n = state.shape[0]
    if n == 0:
        return 0.0
    quadratic = solution @ inputs @ inputs.T @ solution
    linear = solution @ state
    residual = linear + linear.T - quadratic + np.eye(n)
    scale = 1.0 + 2.0 * la.norm(linear) + la.norm(quadratic)
    return float(la.norm(residual) / scale)


def _hamiltonian_solution(state, inputs) -> np.ndarray:
    n = state.shape[0]
    hamiltonian = np.block(
        [[state, -inputs @ inputs.T], [-np.eye(n), -state.T]]
    )
    values, vectors = la.eig(hamiltonian)
    stable = values.real < 0.0
    if stable.sum() != n:
        raise RiccatiNoSolution(
            f"Hamiltonian has {stable.sum()} stable eigenvalues, expected {n}"
        )
    upper, lower = vectors[:n, stable], vectors[n:, stable]
    if np.linalg.cond(upper) > 1e12:
        raise RiccatiNoSolution("stable invariant subspace is not a graph")
    solution = np.real(la.solve(upper.T, lower.T).T)
    return 0.5 * (solution + solution.T)


def _refine(state, inputs, solution, steps: int = 5) -> np.ndarray:
    n = state.shape[0]
    for _ in range(steps):
        closed = state - inputs @ inputs.T @ solution
        quadratic = solution @ inputs @ inputs.T @ solution
        residual = solution @ state + state.T @ solution - quadratic + np.eye(n)
        if la.norm(residual) <= 1e-14 * (1.0 + la.norm(quadratic)):
            break
        step = la.solve_continuous_lyapunov(closed.T, -residual)
        solution = solution + 0.5 * (step + step.T)
    return solution


def solve_riccati(
    eigenvalues: np.ndarray,
    inputs: np.ndarray,
    decay_rate: float,
    method: str = "hamiltonian",
    state_projection: Optional[np.ndarray] = None,
) -> FeedbackGain:
    """Solves ΠA_s + A_sᵀΠ − ΠB_uB_uᵀΠ + I = 0 with A_s = A_u + λI.

    Parameters
    ----------
    eigenvalues : np.ndarray
        A_u, either the (N,) unstable eigenvalues or an (N, N) matrix.
    inputs : np.ndarray
        B_u, (N, m).
    decay_rate : float
        λ.
    method : str
        "hamiltonian" (stable invariant subspace of the Hamiltonian matrix,
        refined by Newton steps) or "schur" (scipy's ordered Schur solver).
    state_projection : Optional[np.ndarray]
        Φ_Fᵀ M_F, stored on the gain so it can act on full states.

    Returns
    -------
    FeedbackGain

    Raises
    ------
    RiccatiNoSolution
        Raised if the pair is not controllable or no stabilizing solution is
        found.
    """
    eigenvalues = np.asarray(eigenvalues, dtype=float)
    unshifted = np.diag(eigenvalues) if eigenvalues.ndim == 1 else eigenvalues
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    n = unshifted.shape[0]
    m = inputs.shape[1]

    if n == 0:
        return FeedbackGain(
            decay_rate=float(decay_rate),
            riccati_solution=np.zeros((0, 0)),
            modal_gain=np.zeros((m, 0)),
            closed_loop_poles=np.zeros(0, dtype=complex),
            riccati_residual=0.0,
            state_projection=state_projection,
        )

    state = unshifted + decay_rate * np.eye(n)
    rank, _ = kalman_rank(state, inputs)
    if rank < n:
        raise RiccatiNoSolution(
            f"projected pair is not controllable (rank {rank} < {n})"
        )

    if method == "hamiltonian":
        solution = _refine(state, inputs, _hamiltonian_solution(state, inputs))
    elif method == "schur":
        try:
            solution = la.solve_continuous_are(state, inputs, np.eye(n), np.eye(m))
        except (ValueError, np.linalg.LinAlgError) as ex:
            raise RiccatiNoSolution(str(ex)) from ex
        solution = 0.5 * (solution + solution.T)
    else:
        raise ValueError(f"unknown Riccati method {method!r}")

    modal_gain = -inputs.T @ solution
    poles = la.eigvals(unshifted + inputs @ modal_gain)
    residual = riccati_residual(state, inputs, solution)
    gain = FeedbackGain(
        decay_rate=float(decay_rate),
        riccati_solution=solution,
        modal_gain=modal_gain,
        closed_loop_poles=poles[np.argsort(-poles.real)],
        riccati_residual=residual,
        state_projection=state_projection,
    )
    logger.info(
        "Riccati residual %.2e, slowest closed-loop pole %.4f",
        residual,
        gain.closed_loop_poles[0].real,
    )
    return gain


def feedback_projection(subspace: UnstableSubspace, blocks: BlockSystem) -> np.ndarray:
    """Φ_Fᵀ M_F, the modal coordinates of full states."""
    full_modes = blocks.prolongation_full @ subspace.basis
    return np.asarray((blocks.M0 @ full_modes).T)


def design_feedback(
    subspace: UnstableSubspace,
    inputs: np.ndarray,
    blocks: BlockSystem,
    method: str = "hamiltonian",
) -> FeedbackGain:
    """Riccati feedback of the projected pair, acting on full states."""
    return solve_riccati(
        subspace.eigenvalues,
        inputs,
        subspace.decay_rate,
        method=method,
        state_projection=feedback_projection(subspace, blocks),
    )

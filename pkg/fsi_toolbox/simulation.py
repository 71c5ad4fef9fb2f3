import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, List, Optional, Tuple, Union

import numpy as np

from .classes import DegenerateFit, FeedbackScheme, IncompatibleState, LoopMode
from .coupled_operators import BlockSystem
from .exporters import write_table
from .spectral import SpectralDecomposition
from .stabilization import ControlBasis, FeedbackGain, assemble_B, lifting_mass

logger = logging.getLogger(__name__)

MIN_FIT_SAMPLES = 10
COMPATIBILITY_TOLERANCE = 1e-8

Control = Union[None, np.ndarray, Callable[[float], np.ndarray], FeedbackGain]


@dataclass(frozen=True)
class CoupledState:
    """A state of the coupled system at one instant.

    The fluid velocity is TV + Wz: the reduced state V carries the interior
    velocity and the rigid velocity, z the control coefficients of the lifted
    interface modes. The interface trace is h′ + ω∧y + ζ and the wall trace
    is zero by construction.

    Attributes
    ----------
    reduced : np.ndarray
        V = (u_I, h′₁, h′₂, ω).
    control : np.ndarray
        z, coefficients of the control modes.
    time : float
    pressure : Optional[np.ndarray]
        Multiplier of the last step, not part of the evolution state.
    """

    reduced: np.ndarray
    control: np.ndarray = field(default_factory=lambda: np.zeros(0))
    time: float = 0.0
    pressure: Optional[np.ndarray] = None

    @property
    def rigid_velocity(self) -> np.ndarray:
        return self.reduced[-3:]

    def full(self, blocks: BlockSystem, basis: Optional[ControlBasis] = None):
        """Full state (fluid velocity, h′, ω)."""
        lifting = None
        if basis is not None and len(self.control):
            lifting = basis.lifting(self.control)
        return blocks.full_state(self.reduced, lifting)

    @classmethod
    def from_full(
        cls,
        blocks: BlockSystem,
        state: np.ndarray,
        time: float = 0.0,
        tol: float = COMPATIBILITY_TOLERANCE,
    ) -> "CoupledState":
        """Uncontrolled state from full data (u₀, h₁, ω₀).

        Raises
        ------
        IncompatibleState
            Raised if u₀ differs from h₁ + ω₀∧y on the interface, does not
            vanish on the wall, or is not discretely divergence-free.
        """
        spaces = blocks.spaces
        n = spaces.n_velocity
        velocity, rigid = state[:n], state[n:]
        scale = max(np.abs(state).max(initial=0.0), np.finfo(float).tiny)

        trace = spaces.interface_values(velocity)
        expected = spaces.interface_values(blocks.forms.rigid_trace @ rigid)
        mismatch = np.abs(trace - expected).max(initial=0.0)
        if mismatch > tol * scale:
            raise IncompatibleState(
                f"interface trace differs from h1 + omega^y by {mismatch:.3e}"
            )
        wall = np.abs(velocity[spaces.boundary_dof_index["outer"]]).max(initial=0.0)
        if wall > tol * scale:
            raise IncompatibleState(
                f"velocity does not vanish on the wall ({wall:.3e})"
            )

        reduced = blocks.reduce(state)
        divergence = blocks.divergence_residual(reduced)
        norm = abs(blocks.constraint).sum(axis=1).max() * np.abs(reduced).max()
        if divergence > tol * max(norm, np.finfo(float).tiny):
            raise IncompatibleState(
                f"velocity is not divergence-free ({divergence:.3e})"
            )
        return cls(reduced=reduced, time=time)


@dataclass
class Trajectory:
    """Sampled history of a run.

    Attributes
    ----------
    times : np.ndarray
    energies : np.ndarray
        E = ½(‖u‖² + M|h′|² + I₀ω²) of the full state.
    rigid : np.ndarray
        (n_samples, 3) h′₁, h′₂, ω.
    controls : np.ndarray
        (n_samples, m) realized control coefficients.
    dissipation : np.ndarray
        2ν‖D(u)‖² of the full state.
    states : List[CoupledState]
        Recorded states.
    mode : LoopMode
    """

    times: np.ndarray
    energies: np.ndarray
    rigid: np.ndarray
    controls: np.ndarray
    dissipation: np.ndarray
    states: List[CoupledState]
    mode: LoopMode = LoopMode.OPEN

    def measure_decay(self, window: Optional[Tuple[float, float]] = None) -> float:
        return measure_decay(self.times, self.energies, window)

    def to_csv(self, path: Union[Path, str]):
        m = self.controls.shape[1]
        columns = ["t", "energy", "|h'|", "|omega|"] + [f"zeta_{j}" for j in range(m)]
        rows = np.column_stack(
            (
                self.times,
                self.energies,
                np.linalg.norm(self.rigid[:, :2], axis=1),
                np.abs(self.rigid[:, 2]),
                self.controls,
            )
        )
        write_table(path, columns, rows)


def measure_decay(
    times: np.ndarray,
    energies: np.ndarray,
    window: Optional[Tuple[float, float]] = None,
) -> float:
    """State-norm decay rate: minus half the least-squares slope of log E.

    Parameters
    ----------
    times, energies : np.ndarray
    window : Optional[Tuple[float, float]]
        Closed time interval of the fit; the whole record by default.

    Returns
    -------
    float

    Raises
    ------
    DegenerateFit
        Raised with fewer than 10 samples in the window or non-positive
        (underflowed) energies.
    """
    times, energies = np.asarray(times, float), np.asarray(energies, float)
    if window is not None:
        inside = (times >= window[0]) & (times <= window[1])
        times, energies = times[inside], energies[inside]
    if len(times) < MIN_FIT_SAMPLES:
        raise DegenerateFit(f"{len(times)} samples in the fit window, need 10")
    if np.any(energies <= np.finfo(float).tiny) or not np.all(np.isfinite(energies)):
        raise DegenerateFit("energy underflows in the fit window")
    slope = np.polyfit(times, np.log(energies), 1)[0]
    return float(-0.5 * slope)


class CoupledIntegrator:
    """Implicit midpoint integrator of the coupled saddle-point system.

    With shift s the integrated system is the shifted one,
    𝕄V′ = (s𝕄 − K)V − Bᵀp + B_s z − TᵀM_F W z′, whose trajectories are
    e^{st} times those of the physical system (s = 0).

    Parameters
    ----------
    blocks : BlockSystem
    basis : Optional[ControlBasis]
        Control modes; None for the uncontrolled system.
    dt : float
        Time step, positive.
    shift : float
    feedback : FeedbackScheme
        How a FeedbackGain is applied: lagged (gain of the previous state) or
        implicit (gain of the new state, by a low-rank update).
    """

    def __init__(
        self,
        blocks: BlockSystem,
        basis: Optional[ControlBasis] = None,
        dt: float = 1e-2,
        shift: float = 0.0,
        feedback: FeedbackScheme = FeedbackScheme.LAGGED,
    ):
        if not dt > 0.0:
            raise ValueError(f"time step must be positive, got {dt}")
        self.blocks = blocks
        self.basis = basis
        self.dt = float(dt)
        self.shift = float(shift)
        self.feedback = feedback

        half = 0.5 * self.dt
        self.solver = blocks.pencil.factor(half, 1.0 - self.shift * half)
        self.explicit = (
            (1.0 + self.shift * half) * blocks.mass - half * blocks.stiffness
        )
        if basis is None:
            self.injection = np.zeros((blocks.n_reduced, 0))
            self.coupling = np.zeros((blocks.n_reduced, 0))
        else:
            self.injection = assemble_B(basis, blocks, self.shift)
            self.coupling = lifting_mass(basis, blocks)
        self._implicit_cache = {}

    @property
    def n_controls(self) -> int:
        return self.injection.shape[1]

    def _control_load(self, before: np.ndarray, after: np.ndarray) -> np.ndarray:
        half = 0.5 * self.dt
        return half * self.injection @ (before + after) - self.coupling @ (
            after - before
        )

    def _next_control(self, state: CoupledState, control: Control) -> np.ndarray:
        if control is None:
            return np.zeros(self.n_controls)
        if isinstance(control, FeedbackGain):
            return control(state.full(self.blocks, self.basis))
        if callable(control):
            return np.asarray(control(state.time + self.dt), dtype=float)
        return np.asarray(control, dtype=float)

    def _implicit_update(self, gain: FeedbackGain):
        key = id(gain)
        if key not in self._implicit_cache:
            blocks, n = self.blocks, self.blocks.spaces.n_velocity
            matrix = gain.gain_matrix
            on_state = matrix @ blocks.prolongation_full
            on_control = matrix[:, :n] @ self.basis.liftings
            slaving = np.linalg.solve(np.eye(self.n_controls) - on_control, on_state)
            columns = 0.5 * self.dt * self.injection - self.coupling
            response = self.solver.solve(columns)[0]
            capacitance = np.eye(self.n_controls) - slaving @ response
            self._implicit_cache[key] = (slaving, response, capacitance)
        return self._implicit_cache[key]

    def step(self, state: CoupledState, control: Control = None) -> CoupledState:
        """Advances one time step.

        Parameters
        ----------
        state : CoupledState
        control : Control
            None (ζ = 0), control coefficients, a callable t ↦ coefficients, or
            a FeedbackGain.

        Returns
        -------
        CoupledState
        """
        before = state.control if len(state.control) else np.zeros(self.n_controls)
        rhs = self.explicit @ state.reduced

        implicit = (
            isinstance(control, FeedbackGain)
            and self.feedback is FeedbackScheme.IMPLICIT
            and control.dimension > 0
        )
        if implicit:
            slaving, response, capacitance = self._implicit_update(control)
            half = 0.5 * self.dt
            rhs += half * self.injection @ before + self.coupling @ before
            reduced, pressure = self.solver.solve(rhs)
            correction = np.linalg.solve(capacitance, slaving @ reduced)
            reduced = reduced + response @ correction
            after = slaving @ reduced
        else:
            after = self._next_control(state, control)
            rhs += self._control_load(before, after)
            reduced, pressure = self.solver.solve(rhs)
        return CoupledState(
            reduced=reduced,
            control=after,
            time=state.time + self.dt,
            pressure=pressure / self.dt,
        )

    def run(
        self,
        initial: CoupledState,
        final_time: float,
        control: Control = None,
        record_every: Optional[int] = None,
    ) -> Trajectory:
        """Integrates from initial up to final_time.

        Parameters
        ----------
        initial : CoupledState
        final_time : float
        control : Control
        record_every : Optional[int]
            Keep every k-th state; only the end points by default.

        Returns
        -------
        Trajectory
        """
        if not final_time > initial.time:
            raise ValueError("final time must exceed the initial time")
        n_steps = int(round((final_time - initial.time) / self.dt))
        mode = LoopMode.CLOSED if isinstance(control, FeedbackGain) else LoopMode.OPEN
        if not len(initial.control):
            initial = replace(initial, control=np.zeros(self.n_controls))

        blocks, basis = self.blocks, self.basis
        times = np.empty(n_steps + 1)
        energies = np.empty(n_steps + 1)
        dissipation = np.empty(n_steps + 1)
        rigid = np.empty((n_steps + 1, 3))
        controls = np.empty((n_steps + 1, self.n_controls))
        states = [initial]

        state = initial
        for k in range(n_steps + 1):
            if k:
                state = self.step(state, control)
                if record_every and k % record_every == 0:
                    states.append(state)
            full = state.full(blocks, basis)
            times[k] = state.time
            energies[k] = 0.5 * full @ (blocks.M0 @ full)
            fluid = full[: blocks.spaces.n_velocity]
            dissipation[k] = fluid @ (blocks.forms.viscous_matrix @ fluid)
            rigid[k] = state.rigid_velocity
            controls[k] = state.control
        if states[-1] is not state:
            states.append(state)

        logger.info(
            "%s-loop run: %d steps of %.3g, energy %.3e -> %.3e",
            mode.value,
            n_steps,
            self.dt,
            energies[0],
            energies[-1],
        )
        return Trajectory(times, energies, rigid, controls, dissipation, states, mode)


def energy_defect(
    blocks: BlockSystem,
    before: CoupledState,
    after: CoupledState,
    dt: float,
    rule: str = "trapezoid",
) -> float:
    """ΔE + ∫2ν‖D(u)‖² dt over one uncontrolled step.

    The dissipation integral uses the trapezoid rule (local error O(dt³)) or
    the midpoint value (exact for the implicit midpoint step).
    """
    change = blocks.energy(after.reduced) - blocks.energy(before.reduced)
    if rule == "midpoint":
        middle = 0.5 * (before.reduced + after.reduced)
        return change + dt * blocks.dissipation(middle)
    if rule == "trapezoid":
        return change + 0.5 * dt * (
            blocks.dissipation(before.reduced) + blocks.dissipation(after.reduced)
        )
    raise ValueError(f"unknown quadrature rule {rule!r}")


def random_compatible_state(
    blocks: BlockSystem, rng: np.random.Generator
) -> CoupledState:
    """Random divergence-free state with trace h₁ + ω₀∧y, unit energy."""
    reduced = blocks.project_compatible(rng.standard_normal(blocks.n_reduced))
    reduced /= np.sqrt(2.0 * blocks.energy(reduced))
    return CoupledState(reduced=reduced)


def eigenmode_state(decomp: SpectralDecomposition, index: int) -> CoupledState:
    if not 0 <= index < decomp.count:
        raise ValueError(
            f"eigenmode index {index} outside the {decomp.count} computed pairs"
        )
    return CoupledState(reduced=np.real(decomp.eigenvectors[:, index]).copy())


def default_time_step(decay_rate: float) -> float:
    return min(1e-2, 0.1 / decay_rate)


def default_final_time(decay_rate: float) -> float:
    return 8.0 / decay_rate

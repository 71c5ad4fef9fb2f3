import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Union

import numpy as np
import scipy.linalg as la
from scipy.sparse.linalg import ArpackNoConvergence, LinearOperator, eigsh

from .classes import (
    InsufficientSpectrum,
    LambdaOnSpectrum,
    NonConvergence,
    ShiftOnSpectrum,
    SolverDivergence,
)
from .coupled_operators import BlockSystem, SaddlePencil
from .exporters import write_table

logger = logging.getLogger(__name__)

CLUSTER_TOLERANCE = 1e-6
SPLIT_GAP = 1e-6
SHIFT_GAP = 1e-8


@dataclass(frozen=True)
class SpectralDecomposition:
    """Eigenpairs of 𝔸v = μ𝕄v on discretely divergence-free states.

    Attributes
    ----------
    eigenvalues : np.ndarray
        Sorted in descending order (slowest decay first).
    eigenvectors : np.ndarray
        (n_reduced, count), 𝕄-orthonormal columns.
    residuals : np.ndarray
        ‖𝔸v − μ𝕄v‖/‖v‖ with the constraint forces removed.
    shift : float
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    residuals: np.ndarray
    shift: float = 0.0

    @property
    def count(self) -> int:
        return len(self.eigenvalues)

    @property
    def max_imag(self) -> float:
        return float(np.max(np.abs(np.imag(self.eigenvalues)), initial=0.0))

    def orthonormality_defect(self, mass) -> float:
        """max |⟨v_i, 𝕄v_j⟩ − δ_ij|."""
        gram = self.eigenvectors.conj().T @ (mass @ self.eigenvectors)
        return float(np.max(np.abs(gram - np.eye(self.count)), initial=0.0))

    def clusters(self, rtol: float = CLUSTER_TOLERANCE) -> List[np.ndarray]:
        return cluster_indices(np.real(self.eigenvalues), rtol)

    def to_csv(self, path: Union[Path, str]):
        rows = np.column_stack(
            (np.arange(self.count), np.real(self.eigenvalues), self.residuals)
        )
        write_table(path, ["index", "eigenvalue", "residual"], rows)


@dataclass(frozen=True)
class UnstableSubspace:
    """Span of the eigenvectors with μ > −λ and its 𝕄-orthogonal projector.

    Attributes
    ----------
    basis : np.ndarray
        (n_reduced, N) 𝕄-orthonormal eigenvectors.
    eigenvalues : np.ndarray
        (N,) the unstable eigenvalues.
    decay_rate : float
        The target rate λ.
    mass : sparse matrix
        𝕄, defining the projector P_u x = ΦΦᵀ𝕄x.
    """

    basis: np.ndarray
    eigenvalues: np.ndarray
    decay_rate: float
    mass: object

    @property
    def dimension(self) -> int:
        return self.basis.shape[1]

    def coordinates(self, state: np.ndarray) -> np.ndarray:
        """Φᵀ𝕄x, the modal coordinates of reduced states (columns allowed)."""
        return self.basis.T @ (self.mass @ state)

    def project(self, state: np.ndarray) -> np.ndarray:
        return self.basis @ self.coordinates(state)

    def idempotency_defect(self, state: np.ndarray) -> float:
        once = self.project(state)
        scale = max(np.linalg.norm(once), np.finfo(float).tiny)
        return float(np.linalg.norm(self.project(once) - once) / scale)

    def commutation_defect(self, blocks: BlockSystem, vectors: np.ndarray) -> float:
        """max ‖P_u𝒜v − 𝒜P_uv‖/‖v‖ over the given columns."""
        worst = 0.0
        for v in np.atleast_2d(vectors.T):
            left = self.project(blocks.apply_generator(v))
            right = blocks.apply_generator(self.project(v))
            worst = max(worst, np.linalg.norm(left - right) / np.linalg.norm(v))
        return float(worst)


def cluster_indices(values: np.ndarray, rtol: float = CLUSTER_TOLERANCE):
    """Groups sorted values closer than rtol (relative) into clusters."""
    groups, current = [], [0]
    for i in range(1, len(values)):
        scale = max(abs(values[i]), abs(values[i - 1]), 1.0)
        if abs(values[i] - values[i - 1]) <= rtol * scale:
            current.append(i)
        else:
            groups.append(np.array(current))
            current = [i]
    if len(values):
        groups.append(np.array(current))
    return groups


def _orthonormalize(values, vectors, mass, rtol):
    for group in cluster_indices(values, rtol):
        block = vectors[:, group]
        gram = block.T @ (mass @ block)
        w, u = la.eigh(0.5 * (gram + gram.T))
        vectors[:, group] = block @ (u / np.sqrt(w)) @ u.T
    return vectors


def _fix_signs(vectors: np.ndarray) -> np.ndarray:
    pivots = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[pivots, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def _residuals(pencil: SaddlePencil, values, vectors) -> np.ndarray:
    out = np.empty(len(values))
    for i, (mu, v) in enumerate(zip(values, vectors.T)):
        residual = pencil.stiffness @ v + mu * (pencil.mass @ v)
        if np.iscomplexobj(residual):
            residual = pencil.constrained_part(
                residual.real
            ) + 1j * pencil.constrained_part(residual.imag)
        else:
            residual = pencil.constrained_part(residual)
        out[i] = np.linalg.norm(residual) / np.linalg.norm(v)
    return out


def solve_eigs(
    blocks: BlockSystem,
    count: int,
    shift: float = 0.0,
    pencil: Optional[SaddlePencil] = None,
    rng: Optional[np.random.Generator] = None,
    maxiter: Optional[int] = None,
) -> SpectralDecomposition:
    """Leading eigenpairs of the coupled pencil by shift-invert Lanczos.

    The shifted saddle-point matrix is factorized once and applied as the
    inverse operator, so the divergence constraint stays explicit.

    Parameters
    ----------
    blocks : BlockSystem
    count : int
        Number of eigenpairs nearest to shift.
    shift : float
        Eigenvalue guess μ; must not be an eigenvalue.
    pencil : Optional[SaddlePencil]
        Defaults to the coupled pencil of blocks.
    rng : Optional[np.random.Generator]
        Start vector source.
    maxiter : Optional[int]

    Returns
    -------
    SpectralDecomposition

    Raises
    ------
    ShiftOnSpectrum
        Raised if the shifted matrix is singular or shift is an eigenvalue.
    NonConvergence
        Raised if the Lanczos iteration does not converge.
    """
    pencil = blocks.pencil if pencil is None else pencil
    if count < 1:
        raise ValueError(f"count must be at least 1, got {count}")
    available = pencil.size - pencil.n_pressure
    if count >= available:
        raise InsufficientSpectrum(
            f"{count} eigenpairs requested, the constrained pencil has {available}"
        )

    sigma = -float(shift)
    try:
        solver = pencil.factor(1.0, -sigma)
    except SolverDivergence as ex:
        raise ShiftOnSpectrum(f"shift {shift} makes the pencil singular") from ex

    def inverse(x):
        return solver.solve(x)[0]

    operator = LinearOperator(
        (pencil.size, pencil.size), matvec=inverse, dtype=float
    )
    rng = np.random.default_rng(0) if rng is None else rng
    start = inverse(pencil.mass @ rng.standard_normal(pencil.size))

    try:
        theta, vectors = eigsh(
            pencil.stiffness,
            k=count,
            M=pencil.mass,
            sigma=sigma,
            which="LM",
            OPinv=operator,
            v0=start,
            maxiter=maxiter,
        )
    except ArpackNoConvergence as ex:
        raise NonConvergence(f"Lanczos did not converge: {ex}") from ex
    except SolverDivergence as ex:
        raise ShiftOnSpectrum(f"shift {shift} makes the pencil singular") from ex

    gap = np.min(np.abs(theta - sigma))
    if gap <= SHIFT_GAP * max(1.0, abs(sigma)):
        raise ShiftOnSpectrum(f"shift {shift} lies on the spectrum (gap {gap:.2e})")

    order = np.argsort(theta)
    values = -theta[order]
    vectors = _orthonormalize(values, vectors[:, order], pencil.mass, CLUSTER_TOLERANCE)
    vectors = _fix_signs(vectors)
    residuals = _residuals(pencil, values, vectors)
    logger.info(
        "%d eigenpairs, leading %.6f, max residual %.2e",
        count,
        values[0],
        residuals.max(),
    )
    return SpectralDecomposition(values, vectors, residuals, float(shift))


def dense_eigs(
    blocks: BlockSystem,
    count: Optional[int] = None,
    pencil: Optional[SaddlePencil] = None,
    hermitian: bool = True,
) -> SpectralDecomposition:
    """Brute-force eigensolve on a basis of the constraint kernel.

    With hermitian=False the reduced pencil is handed to a general eigensolver,
    exposing any imaginary parts produced by roundoff.
    """
    pencil = blocks.pencil if pencil is None else pencil
    kernel = la.null_space(pencil.constraint.toarray())
    stiffness = kernel.T @ (pencil.stiffness @ kernel)
    mass = kernel.T @ (pencil.mass @ kernel)
    if hermitian:
        theta, coefficients = la.eigh(
            0.5 * (stiffness + stiffness.T), 0.5 * (mass + mass.T)
        )
    else:
        theta, coefficients = la.eig(stiffness, mass)
        order = np.argsort(theta.real)
        theta, coefficients = theta[order], coefficients[:, order]
    count = len(theta) if count is None else count
    values = -theta[:count]
    vectors = kernel @ coefficients[:, :count]
    if hermitian:
        vectors = _fix_signs(vectors)
    return SpectralDecomposition(values, vectors, _residuals(pencil, values, vectors))


def dirichlet_stokes_eigs(blocks: BlockSystem, count: int, **kwargs):
    """Leading no-slip Stokes eigenpairs of the fluid with the solid at rest."""
    return solve_eigs(blocks, count, pencil=blocks.dirichlet_pencil, **kwargs)


def invariance_residuals(
    decomp: SpectralDecomposition, blocks: BlockSystem
) -> np.ndarray:
    """‖𝒜v − μv‖/‖v‖ per eigenpair."""
    return np.array(
        [
            np.linalg.norm(blocks.apply_generator(v) - mu * v) / np.linalg.norm(v)
            for mu, v in zip(decomp.eigenvalues, decomp.eigenvectors.T)
        ]
    )


def split_spectrum(
    decomp: SpectralDecomposition, decay_rate: float, mass
) -> UnstableSubspace:
    """Separates the eigenvalues above −λ.

    Parameters
    ----------
    decomp : SpectralDecomposition
    decay_rate : float
        λ > 0.
    mass : sparse matrix
        The coupled mass 𝕄.

    Returns
    -------
    UnstableSubspace

    Raises
    ------
    LambdaOnSpectrum
        Raised if −λ lies within 1e-6 of a computed eigenvalue.
    InsufficientSpectrum
        Raised if −λ is not above the last computed eigenvalue.
    """
    values = np.real(decomp.eigenvalues)
    distance = np.min(np.abs(values + decay_rate))
    if distance <= SPLIT_GAP * max(1.0, decay_rate):
        raise LambdaOnSpectrum(
            f"-lambda = {-decay_rate:.8g} lies on the spectrum (gap {distance:.2e})"
        )
    if values[-1] >= -decay_rate:
        raise InsufficientSpectrum(
            f"the last computed eigenvalue {values[-1]:.6g} does not bracket "
            f"-lambda = {-decay_rate:.6g}"
        )
    unstable = values > -decay_rate
    subspace = UnstableSubspace(
        basis=decomp.eigenvectors[:, unstable],
        eigenvalues=values[unstable],
        decay_rate=float(decay_rate),
        mass=mass,
    )
    logger.info("unstable subspace of dimension %d", subspace.dimension)
    return subspace


def ensure_bracket(
    blocks: BlockSystem,
    decay_rate: float,
    count: int,
    margin: Optional[float] = None,
    rng: Optional[np.random.Generator] = None,
) -> SpectralDecomposition:
    """Solves for eigenpairs, doubling count until the spectrum reaches below
    −λ − margin (margin defaults to 2λ).

    Raises
    ------
    InsufficientSpectrum
        Raised if −λ cannot be bracketed.
    """
    margin = 2.0 * decay_rate if margin is None else margin
    limit = blocks.pencil.size - blocks.pencil.n_pressure - 1
    count = min(count, limit)
    while True:
        decomp = solve_eigs(blocks, count, rng=rng)
        if decomp.eigenvalues[-1] < -decay_rate - margin or count >= limit:
            break
        logger.debug(
            "spectrum ends at %.4f above %.4f, doubling to %d pairs",
            decomp.eigenvalues[-1],
            -decay_rate - margin,
            min(2 * count, limit),
        )
        count = min(2 * count, limit)
    if decomp.eigenvalues[-1] >= -decay_rate:
        raise InsufficientSpectrum(
            f"{decomp.count} eigenpairs do not reach -lambda = {-decay_rate:.6g}"
        )
    return decomp

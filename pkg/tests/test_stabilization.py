import json

import numpy as np
import pytest

from fsi_toolbox.classes import ModeFamily, RiccatiNoSolution
from fsi_toolbox.stabilization import (
    assemble_B,
    build_control_basis,
    kalman_rank,
    lifting_mass,
    obstruction_basis,
    project_and_check_controllability,
    projected_input,
    solve_riccati,
)


def obstruction_weights(basis, obstruction):
    """Coefficients of the obstruction modes in the original basis."""
    return np.linalg.lstsq(basis.liftings, obstruction.liftings, rcond=None)[0]


class TestControlBasis:
    def test_trigonometric_labels(self, basis):
        assert basis.dimension == 6
        assert basis.labels[0] == "spin"
        assert "normal" not in basis.labels
        assert basis.labels[1:3] == ["cos1-normal", "sin1-normal"]

    def test_modes_are_flux_free(self, basis, blocks):
        np.testing.assert_allclose(basis.fluxes, 0.0, atol=1e-8)
        for values in basis.values:
            assert abs(blocks.operators.interface_flux(values)) <= 1e-10

    def test_modes_are_independent(self, basis):
        assert basis.gram_condition <= 1e3
        np.testing.assert_allclose(basis.gram, basis.gram.T)

    def test_liftings_match_the_modes(self, basis, spaces):
        for j in range(basis.dimension):
            np.testing.assert_allclose(
                spaces.interface_values(basis.liftings[:, j]),
                basis.values[j],
                atol=1e-14,
            )

    def test_single_tangential_mode(self, blocks):
        spin = build_control_basis(blocks.operators, 1, ModeFamily.TANGENTIAL)
        assert spin.labels == ["spin"]

    def test_tangential_family_has_no_normal_modes(self, blocks):
        tangential = build_control_basis(blocks.operators, 5, ModeFamily.TANGENTIAL)
        assert not any("normal" in label for label in tangential.labels)

    def test_empty_basis(self, blocks):
        with pytest.raises(ValueError):
            build_control_basis(blocks.operators, 0)


class TestInjection:
    def test_linear_in_the_shift(self, basis, blocks):
        shift = 0.8
        difference = assemble_B(basis, blocks, 2.0 * shift) - assemble_B(
            basis, blocks, shift
        )
        expected = shift * lifting_mass(basis, blocks)
        np.testing.assert_allclose(
            difference, expected, atol=1e-12 * np.abs(expected).max()
        )

    def test_shape(self, basis, blocks):
        assert assemble_B(basis, blocks, 1.0).shape == (blocks.n_reduced, 6)

    def test_zero_mode_has_zero_column(self, basis, blocks):
        weights = np.zeros((basis.dimension, 1))
        empty = basis.combine(weights, ["zero"])
        np.testing.assert_array_equal(assemble_B(empty, blocks, 1.0), 0.0)


class TestKalmanRank:
    def test_distinct_eigenvalues(self):
        rank, _ = kalman_rank(np.diag([1.0, 2.0]), np.array([[1.0], [1.0]]))
        assert rank == 2

    def test_repeated_eigenvalue_needs_two_inputs(self):
        state = np.diag([1.0, 1.0])
        rank, _ = kalman_rank(state, np.array([[1.0], [1.0]]))
        assert rank == 1
        rank, _ = kalman_rank(state, np.eye(2))
        assert rank == 2

    def test_empty_pair(self):
        rank, values = kalman_rank(np.zeros((0, 0)), np.zeros((0, 2)))
        assert rank == 0
        assert values.size == 0


class TestScalarRiccati:
    # mu = -1, lambda = 3: shifted a = 2, b = 1
    @pytest.mark.parametrize("method", ["hamiltonian", "schur"])
    def test_closed_form(self, method):
        gain = solve_riccati(np.array([-1.0]), np.array([[1.0]]), 3.0, method=method)
        root = np.sqrt(5.0)
        assert gain.riccati_solution[0, 0] == pytest.approx(2.0 + root, rel=1e-10)
        assert gain.modal_gain[0, 0] == pytest.approx(-(2.0 + root), rel=1e-10)
        assert gain.closed_loop_poles[0].real == pytest.approx(-3.0 - root)
        assert gain.riccati_residual <= 1e-10

    def test_zero_input(self):
        with pytest.raises(RiccatiNoSolution):
            solve_riccati(np.array([-1.0]), np.array([[0.0]]), 3.0)

    def test_unknown_method(self):
        with pytest.raises(ValueError):
            solve_riccati(np.array([-1.0]), np.array([[1.0]]), 3.0, method="newton")

    def test_no_unstable_modes(self):
        gain = solve_riccati(np.zeros(0), np.zeros((0, 3)), 1.0)
        assert gain.dimension == 0
        assert gain.n_controls == 3
        np.testing.assert_array_equal(gain(np.ones(5)), np.zeros(3))


class TestCoupledFeedback:
    def test_projected_pair_is_controllable(self, subspace, inputs):
        report = project_and_check_controllability(subspace, inputs)
        assert report.dimension == subspace.dimension
        assert report.controllable
        assert report.pbh_controllable
        assert report.to_dict()["rank"] == subspace.dimension

    def test_riccati_solution(self, gain, subspace):
        assert gain.dimension == subspace.dimension
        assert gain.riccati_residual <= 1e-8
        solution = gain.riccati_solution
        np.testing.assert_allclose(solution, solution.T, atol=1e-12)
        assert np.linalg.eigvalsh(solution).min() >= -1e-10

    def test_closed_loop_poles(self, gain, decay_rate):
        assert np.all(gain.closed_loop_poles.real < -decay_rate)

    def test_gain_acts_on_full_states(self, gain, blocks):
        assert gain.gain_matrix.shape == (gain.n_controls, blocks.n_full)
        state = np.ones(blocks.n_full)
        np.testing.assert_allclose(gain(state), gain.gain_matrix @ state)

    def test_methods_agree(self, subspace, inputs, gain):
        schur = solve_riccati(
            subspace.eigenvalues, inputs, subspace.decay_rate, method="schur"
        )
        np.testing.assert_allclose(
            schur.riccati_solution,
            gain.riccati_solution,
            rtol=1e-6,
            atol=1e-8 * np.abs(gain.riccati_solution).max(),
        )

    def test_obstruction_modes_are_invisible(self, basis, inputs):
        obstruction = obstruction_basis(basis, inputs, rows=[0])
        assert obstruction.dimension == basis.dimension - 1
        seen = inputs[0] @ obstruction_weights(basis, obstruction)
        assert np.abs(seen).max() <= 1e-8 * np.abs(inputs).max()
        np.testing.assert_allclose(obstruction.fluxes, 0.0, atol=1e-8)

    def test_obstruction_modes_lose_controllability(
        self, basis, inputs, subspace, blocks, decay_rate
    ):
        obstruction = obstruction_basis(basis, inputs)
        blocked = projected_input(
            subspace, assemble_B(obstruction, blocks, decay_rate), obstruction, blocks
        )
        expected = inputs @ obstruction_weights(basis, obstruction)
        np.testing.assert_allclose(
            blocked, expected, atol=1e-8 * np.abs(inputs).max()
        )
        rank, _ = kalman_rank(np.diag(subspace.eigenvalues + decay_rate), blocked)
        assert rank < subspace.dimension
        report = project_and_check_controllability(subspace, blocked)
        assert not report.controllable
        assert report.pbh_ranks[0] < subspace.dimension

    def test_gain_to_json(self, gain, tmp_path):
        gain.to_json(tmp_path / "gain.json")
        record = json.loads((tmp_path / "gain.json").read_text())
        assert record["N"] == gain.dimension
        assert record["m"] == gain.n_controls
        assert len(record["closed_loop_poles"]) == gain.dimension

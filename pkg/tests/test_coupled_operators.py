import numpy as np
import pytest
from scipy.sparse.linalg import norm as sparse_norm

from fsi_toolbox.classes import FluxViolation
from fsi_toolbox.stabilization import assemble_B

# πa²(a²+b²)/(b²−a²) for a=0.3, b=1.0
ADDED_MASS_TRANSLATION = np.pi * 0.09 * 1.09 / 0.91


@pytest.fixture(scope="module")
def operators(blocks):
    return blocks.operators


@pytest.fixture(scope="module")
def frame(spaces):
    return spaces.interface_frame


class TestNeumannPotentials:
    def test_translation_added_mass(self, blocks):
        assert blocks.added_mass[0, 0] == pytest.approx(
            ADDED_MASS_TRANSLATION, rel=0.05
        )
        assert blocks.added_mass[1, 1] == pytest.approx(
            ADDED_MASS_TRANSLATION, rel=0.05
        )

    def test_rotation_decouples_on_disks(self, blocks):
        scale = blocks.added_mass[0, 0]
        assert np.abs(blocks.added_mass[:, 2]).max() <= 1e-2 * scale
        assert np.abs(blocks.added_mass[2, :]).max() <= 1e-2 * scale

    def test_added_mass_symmetric_psd(self, blocks):
        np.testing.assert_array_equal(blocks.added_mass, blocks.added_mass.T)
        assert np.linalg.eigvalsh(blocks.added_mass).min() >= -1e-10

    def test_boundary_integral_crosscheck(self, blocks):
        np.testing.assert_allclose(
            blocks.added_mass_crosscheck(),
            blocks.added_mass,
            atol=1e-6 * np.abs(blocks.added_mass).max(),
        )

    def test_quadratic_form(self, blocks):
        rng = np.random.default_rng(4)
        data = rng.standard_normal((100, 3))
        energies = np.array([blocks.added_mass_energy(v) for v in data])
        expected = np.einsum("ij,ij->i", data, data @ blocks.added_mass)
        np.testing.assert_allclose(energies, expected, rtol=1e-8)

    def test_rotating_disk_displaces_little_fluid(self, blocks):
        # only the polygonal facets of the disk push fluid when it spins
        spin = blocks.added_mass_energy([0.0, 0.0, 1.0])
        assert spin <= 1e-2 * blocks.added_mass_energy([1.0, 0.0, 0.0])

    def test_zero_datum(self, operators):
        solution = operators.solve_neumann(np.zeros(3))
        np.testing.assert_array_equal(solution.potential, 0.0)
        assert solution.residual <= 1e-10

    def test_potential_has_zero_mean(self, operators, spaces):
        solution = operators.solve_neumann([1.0, 0.0, 0.0])
        assert abs(spaces.fluid.integrals @ solution.potential) <= 1e-10


class TestStokesLifting:
    def test_normal_datum_rejected(self, operators, frame):
        with pytest.raises(FluxViolation):
            operators.lift_stokes(frame["normal"])

    def test_tangential_mode(self, operators, spaces, forms, frame):
        values = np.cos(2.0 * frame["theta"])[:, None] * frame["tangent"]
        lifted = operators.lift_stokes(values)
        np.testing.assert_allclose(
            spaces.interface_values(lifted.velocity), values, atol=1e-14
        )
        outer = spaces.boundary_dof_index["outer"]
        np.testing.assert_array_equal(lifted.velocity[outer], 0.0)
        divergence = forms.divergence_matrix @ lifted.velocity
        assert np.abs(divergence).max() <= 1e-9
        assert abs(forms.pressure_mean @ lifted.pressure) <= 1e-9

    def test_rigid_datum(self, blocks, operators, spaces):
        datum = np.array([0.4, -0.2, 1.5])
        trace = spaces.interface_values(blocks.forms.rigid_trace @ datum)
        lifted = operators.lift_stokes(trace)
        np.testing.assert_allclose(
            spaces.interface_values(lifted.velocity), trace, atol=1e-14
        )


class TestLerayProjection:
    def test_gradient_is_removed(self, operators, spaces):
        potential = operators.solve_neumann([1.0, 0.5, 0.0]).potential
        gradient = spaces.fluid.evaluate_gradient(potential)
        projected = operators.leray_project(gradient)
        scale = np.sqrt(operators.inner(gradient, gradient))
        assert np.sqrt(operators.inner(projected, projected)) <= 1e-8 * scale

    def test_orthogonal_split(self, operators, spaces):
        rng = np.random.default_rng(5)
        field = rng.standard_normal(spaces.n_velocity)
        projected = operators.leray_project(field)
        values = operators.quadrature_values(field)
        cross = operators.inner(projected, values - projected)
        assert abs(cross) <= 1e-10 * operators.inner(field, field)

    def test_idempotent(self, operators, spaces):
        rng = np.random.default_rng(6)
        once = operators.leray_project(rng.standard_normal(spaces.n_velocity))
        twice = operators.leray_project(once)
        assert np.abs(twice - once).max() <= 1e-10 * np.abs(once).max()


class TestBlockSystem:
    def test_dimensions(self, blocks, spaces):
        assert blocks.n_reduced == len(spaces.interior_velocity_dofs) + 3
        assert blocks.n_full == spaces.n_velocity + 3
        assert blocks.dimensions["pressure"] == spaces.n_pressure

    def test_self_adjoint(self, blocks, decay_rate):
        assert blocks.asymmetry(decay_rate) <= 1e-12
        assert sparse_norm(blocks.mass - blocks.mass.T) == 0.0

    def test_adjoint_pairing(self, blocks, decay_rate):
        rng = np.random.default_rng(8)
        states = np.column_stack(
            [
                blocks.project_compatible(rng.standard_normal(blocks.n_reduced))
                for _ in range(100)
            ]
        )
        pairing = blocks.shifted_pairing(states, decay_rate)
        assert pairing.shape == (100, 100)
        scale = np.abs(pairing).max()
        assert np.abs(pairing - pairing.T).max() <= 1e-9 * scale

        reduced = states.T @ ((decay_rate * blocks.mass + blocks.stiffness) @ states)
        np.testing.assert_allclose(pairing, reduced, atol=1e-10 * scale)

    def test_pairing_is_the_energy_on_the_diagonal(self, blocks, decay_rate):
        rng = np.random.default_rng(9)
        state = blocks.project_compatible(rng.standard_normal(blocks.n_reduced))
        pairing = blocks.shifted_pairing(state[:, None], decay_rate)[0, 0]
        expected = 2.0 * decay_rate * blocks.energy(state) + blocks.dissipation(state)
        assert pairing == pytest.approx(expected, rel=1e-10)

    def test_rigid_block_of_the_mass(self, blocks, rigid, forms):
        rigid_state = np.zeros(blocks.n_reduced)
        rigid_state[-2] = 1.0
        fluid = blocks.prolongation @ rigid_state
        expected = fluid @ (forms.mass_matrix @ fluid) + rigid.mass
        assert rigid_state @ (blocks.mass @ rigid_state) == pytest.approx(expected)

    def test_full_state_traces(self, blocks, spaces):
        reduced = np.zeros(blocks.n_reduced)
        reduced[-3:] = [0.3, -0.7, 2.0]
        state = blocks.full_state(reduced)
        velocity = state[: spaces.n_velocity]
        expected = spaces.interface_values(blocks.forms.rigid_trace @ reduced[-3:])
        np.testing.assert_allclose(spaces.interface_values(velocity), expected)
        np.testing.assert_array_equal(
            velocity[spaces.boundary_dof_index["outer"]], 0.0
        )
        np.testing.assert_array_equal(blocks.reduce(state), reduced)

    def test_projection_onto_compatible_states(self, blocks):
        rng = np.random.default_rng(7)
        raw = rng.standard_normal(blocks.n_reduced)
        projected = blocks.project_compatible(raw)
        assert blocks.divergence_residual(projected) <= 1e-9 * np.linalg.norm(raw)
        again = blocks.project_compatible(projected)
        np.testing.assert_allclose(again, projected, atol=1e-9 * np.abs(raw).max())

    def test_energy_and_dissipation(self, blocks):
        rng = np.random.default_rng(8)
        state = blocks.project_compatible(rng.standard_normal(blocks.n_reduced))
        assert blocks.energy(state) > 0.0
        assert blocks.dissipation(state) > 0.0

    def test_steady_response_matches_injection(self, blocks, basis, decomposition):
        shift = 0.5 * abs(decomposition.eigenvalues[0])
        column = assemble_B(basis, blocks, shift)[:, 1]
        reduced, _ = blocks.pencil.factor(1.0, -shift).solve(column)
        through_injection = blocks.full_state(reduced, basis.liftings[:, 1])
        direct = blocks.steady_response(basis.values[1], shift)
        gap = np.linalg.norm(direct - through_injection)
        assert gap <= 1e-8 * np.linalg.norm(direct)

    def test_gradient_slaving(self, blocks, decomposition, mesh):
        mode = np.real(decomposition.eigenvectors[:, 0])
        defect = blocks.gradient_part_defect(blocks.prolongation @ mode)
        assert defect <= 10.0 * mesh.mesh_size**2

    def test_effective_mass(self, blocks, decomposition, mesh):
        mode = np.real(decomposition.eigenvectors[:, 0])
        assert blocks.effective_mass_defect(mode) <= 10.0 * mesh.mesh_size**2

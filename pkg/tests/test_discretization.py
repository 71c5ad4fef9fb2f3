import numpy as np
import pytest
from scipy.sparse.linalg import norm as sparse_norm

from fsi_toolbox.discretization import rigid_field


def blocked(field: np.ndarray) -> np.ndarray:
    """(n, 2) nodal values to a component-blocked vector."""
    return np.concatenate((field[:, 0], field[:, 1]))


class TestFunctionSpaces:
    def test_inf_sup_bounded_away_from_zero(self, spaces):
        assert spaces.inf_sup > 0.1

    def test_boundary_dofs_are_disjoint(self, spaces):
        assert len(np.intersect1d(spaces.outer_dofs, spaces.interface_dofs)) == 0
        index = spaces.boundary_dof_index
        assert len(index["outer"]) == 2 * len(spaces.outer_dofs)
        assert len(index["interface"]) == 2 * len(spaces.interface_dofs)

    def test_interior_dofs_complete_the_partition(self, spaces):
        total = (
            len(spaces.interior_dofs)
            + len(spaces.outer_dofs)
            + len(spaces.interface_dofs)
        )
        assert total == spaces.n_fluid

    def test_solid_dofs_match_interface(self, spaces):
        fluid_points = spaces.fluid.points[spaces.interface_dofs]
        solid_points = spaces.solid.points[spaces.solid_boundary_dofs]
        np.testing.assert_allclose(fluid_points, solid_points, atol=1e-14)

    def test_interface_frame(self, spaces):
        frame = spaces.interface_frame
        np.testing.assert_allclose(np.linalg.norm(frame["normal"], axis=1), 1.0)
        outward = np.einsum("ij,ij->i", frame["normal"], frame["points"])
        assert np.all(outward < 0.0)
        np.testing.assert_allclose(
            np.einsum("ij,ij->i", frame["normal"], frame["tangent"]), 0.0, atol=1e-14
        )

    @pytest.mark.parametrize("region", ["fluid", "solid"])
    def test_quadratics_are_reproduced(self, spaces, region):
        space = getattr(spaces, region)

        def quadratic(points):
            x, y = points[..., 0], points[..., 1]
            return 1.0 + x - 2.0 * x * y + y**2

        coefficients = space.interpolate(quadratic)
        expected = quadratic(space.quadrature_points)
        np.testing.assert_allclose(space.evaluate(coefficients), expected, atol=1e-12)

        rotation = space.interpolate(lambda p: np.column_stack((-p[:, 1], p[:, 0])))
        values = space.evaluate_vector(rotation)
        np.testing.assert_allclose(
            values[..., 0], -space.quadrature_points[..., 1], atol=1e-12
        )

    def test_interface_values_and_extension(self, spaces):
        rng = np.random.default_rng(1)
        values = rng.standard_normal((len(spaces.interface_dofs), 2))
        extended = spaces.extend_interface(values)
        np.testing.assert_array_equal(spaces.interface_values(extended), values)
        assert np.count_nonzero(extended) == np.count_nonzero(values)


class TestFormLibrary:
    def test_symmetry(self, forms):
        for matrix in (forms.mass_matrix, forms.viscous_matrix):
            assert sparse_norm(matrix - matrix.T) <= 1e-14 * sparse_norm(matrix)

    @pytest.mark.parametrize("generator", [0, 1, 2])
    def test_rigid_motions_in_viscous_kernel(self, spaces, forms, generator):
        field = blocked(rigid_field(spaces.fluid.points)[:, :, generator])
        residual = np.linalg.norm(forms.viscous_matrix @ field)
        assert residual <= 1e-10 * sparse_norm(forms.viscous_matrix)

    @pytest.mark.parametrize("generator", [0, 1, 2])
    def test_rigid_motions_divergence_free(self, spaces, forms, generator):
        field = blocked(rigid_field(spaces.fluid.points)[:, :, generator])
        assert np.abs(forms.divergence_matrix @ field).max() <= 1e-12

    def test_rigid_trace_has_no_flux(self, forms):
        flux = forms.boundary_flux @ forms.rigid_trace
        np.testing.assert_allclose(flux, 0.0, atol=1e-12)

    def test_normal_flux_is_the_circumference(self, spaces, forms):
        normal = spaces.extend_interface(spaces.interface_frame["normal"])
        flux = forms.boundary_flux @ normal
        assert flux == pytest.approx(2.0 * np.pi * 0.3, rel=0.03)

    def test_discrete_korn(self, spaces, forms):
        rng = np.random.default_rng(2)
        field = np.zeros(spaces.n_velocity)
        free = spaces.interior_velocity_dofs
        field[free] = rng.standard_normal(len(free))
        strain = field @ (forms.viscous_matrix @ field) / forms.viscosity
        gradient = field @ (forms.vector_laplacian @ field)
        assert gradient <= strain * (1.0 + 1e-12)

    def test_mass_is_positive_definite(self, spaces, forms):
        rng = np.random.default_rng(3)
        field = rng.standard_normal(spaces.n_velocity)
        assert field @ (forms.mass_matrix @ field) > 0.0
        assert forms.pressure_mean.sum() == pytest.approx(
            np.pi * (1.0 - 0.09), rel=0.03
        )

    def test_dump(self, forms, tmp_path):
        forms.dump(tmp_path / "matrices")
        for name in ("mass_matrix", "viscous_matrix", "divergence_matrix"):
            lines = (tmp_path / "matrices" / f"{name}.txt").read_text().splitlines()
            assert len(lines) == getattr(forms, name).nnz

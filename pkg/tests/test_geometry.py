from unittest import TestCase

import numpy as np
import pytest

from fsi_toolbox.classes import (
    BoundaryTag,
    CentroidError,
    ConfigError,
    GapViolation,
    RegionTag,
    SolidShape,
)
from fsi_toolbox.geometry import (
    GeometryConfig,
    Mesh,
    build_geometry,
    generate_mesh,
    solid_moments,
)


class TestGeometryConfig(TestCase):
    def test_concentric_disks(self):
        config = build_geometry(GeometryConfig(container_radius=1.0, solid_radius=0.3))
        self.assertAlmostEqual(config.gap, 0.7)
        self.assertIs(config.solid_shape, SolidShape.DISK)

    def test_solid_exceeds_container(self):
        with self.assertRaises(GapViolation):
            build_geometry(GeometryConfig(container_radius=1.0, solid_radius=1.1))

    def test_centered_ellipse(self):
        config = build_geometry(
            GeometryConfig(solid_shape="ellipse", solid_semi_axes=(0.3, 0.15))
        )
        self.assertIs(config.solid_shape, SolidShape.ELLIPSE)
        self.assertAlmostEqual(config.solid_area, np.pi * 0.045)
        self.assertAlmostEqual(config.gap, 0.7)

    def test_off_center_solid(self):
        with self.assertRaises(CentroidError):
            build_geometry(GeometryConfig(solid_center=(0.2, 0.0)))

    def test_ellipse_needs_axes(self):
        with self.assertRaises(ConfigError) as ex:
            GeometryConfig(solid_shape="ellipse")
        self.assertEqual(ex.exception.field, "Geometry.Solid Semi Axes")

    def test_nonpositive_viscosity(self):
        with self.assertRaises(ConfigError) as ex:
            GeometryConfig(viscosity=0.0)
        self.assertEqual(ex.exception.field, "Geometry.Viscosity")

    def test_shape_aliases(self):
        self.assertIs(GeometryConfig(solid_shape="circle").solid_shape, SolidShape.DISK)
        with self.assertRaises(ValueError):
            GeometryConfig(solid_shape="square")

    def test_from_yaml_dict(self):
        config = GeometryConfig.from_yaml_dict(
            {"Container Radius": 2.0, "Solid Radius": 0.5, "Viscosity": 0.05},
            {"Mesh Size": 0.2, "Quality Floor": 25},
        )
        self.assertEqual(config.container_radius, 2.0)
        self.assertEqual(config.solid_radius, 0.5)
        self.assertEqual(config.viscosity, 0.05)
        self.assertEqual(config.mesh_size, 0.2)
        self.assertEqual(config.quality_floor, 25)

    def test_ellipse_boundary_radius(self):
        config = GeometryConfig(solid_shape="ellipse", solid_semi_axes=(0.3, 0.15))
        radius = config.solid_boundary_radius(np.array([0.0, np.pi / 2]))
        np.testing.assert_allclose(radius, [0.3, 0.15])


class TestGenerateMesh:
    def test_regions_and_tags(self, mesh):
        for tag in RegionTag:
            assert len(mesh.region(tag)) > 0
        assert len(mesh.interface_edges) > 0
        assert len(mesh.outer_edges) > 0
        assert np.all(mesh.signed_areas > 0.0)

    def test_quality_floor(self, mesh, geometry):
        assert mesh.min_angle >= geometry.quality_floor

    def test_interface_edges_have_two_owners(self, mesh):
        counts = mesh._interface_edge_owners()
        np.testing.assert_array_equal(counts, np.ones_like(counts))

    def test_boundary_vertices_on_curves(self, mesh):
        interface = np.unique(mesh.interface_edges)
        outer = np.unique(mesh.outer_edges)
        radii = np.linalg.norm(mesh.vertices, axis=1)
        np.testing.assert_allclose(radii[interface], 0.3, atol=1e-12)
        np.testing.assert_allclose(radii[outer], 1.0, atol=1e-12)

    def test_normals_point_into_solid(self, mesh):
        midpoints = mesh.vertices[mesh.interface_edges].mean(axis=1)
        outward = np.einsum("ij,ij->i", mesh.interface_normals(), midpoints)
        assert np.all(outward < 0.0)

    def test_areas_add_up(self, mesh):
        total = mesh.region_area(RegionTag.FLUID) + mesh.region_area(RegionTag.SOLID)
        assert abs(total - np.pi) <= 10.0 * mesh.mesh_size**2

    def test_interface_length_converges(self, geometry, mesh):
        fine = generate_mesh(
            GeometryConfig(mesh_size=geometry.mesh_size / 2, viscosity=0.1)
        )
        exact = 2.0 * np.pi * 0.3
        coarse_error = exact - mesh.boundary_length(BoundaryTag.INTERFACE)
        fine_error = exact - fine.boundary_length(BoundaryTag.INTERFACE)
        assert 3.0 <= coarse_error / fine_error <= 5.0

    def test_ellipse_mesh(self):
        config = build_geometry(
            GeometryConfig(
                solid_shape="ellipse",
                solid_semi_axes=(0.3, 0.15),
                mesh_size=0.1,
                quality_floor=10.0,
            )
        )
        mesh = generate_mesh(config)
        assert mesh.min_angle >= config.quality_floor
        area = mesh.region_area(RegionTag.SOLID)
        assert area == pytest.approx(np.pi * 0.045, rel=0.05)

    def test_save_and_load(self, mesh, tmp_path):
        mesh.save(tmp_path / "mesh.mesh2d")
        loaded = Mesh.from_path(tmp_path / "mesh.mesh2d").check()
        np.testing.assert_allclose(loaded.vertices, mesh.vertices)
        np.testing.assert_array_equal(loaded.triangles, mesh.triangles)
        np.testing.assert_array_equal(loaded.edge_tags, mesh.edge_tags)


class TestSolidMoments:
    def test_disk_moments(self, rigid):
        assert rigid.mass == pytest.approx(np.pi * 0.09, rel=0.03)
        assert rigid.inertia == pytest.approx(np.pi * 0.3**4 / 2, rel=0.06)
        assert np.linalg.norm(rigid.centroid) <= 1e-12
        np.testing.assert_allclose(
            rigid.diagonal, [rigid.mass, rigid.mass, rigid.inertia]
        )

    def test_density_scales_moments(self, mesh, rigid):
        heavy = solid_moments(mesh, 3.0)
        assert heavy.mass == pytest.approx(3.0 * rigid.mass)
        assert heavy.inertia == pytest.approx(3.0 * rigid.inertia)

    def test_zero_density(self, mesh):
        with pytest.raises(ConfigError):
            solid_moments(mesh, 0.0)

    def test_translated_mesh(self, mesh):
        with pytest.raises(CentroidError):
            solid_moments(mesh.translated((0.2, 0.0)), 1.0)

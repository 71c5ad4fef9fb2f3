"""Container, solid and mesh of the reference configuration.

The container is the disk of radius ``b`` centred at the origin. The solid is a
convex shape (disk or ellipse) star-shaped about the origin, with its centroid
at the origin. The fluid occupies the region between the two.
"""
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Dict, Optional, Tuple, Union
from typing_extensions import Self

import numpy as np
from scipy.spatial import Delaunay

from .classes import (
    BoundaryTag,
    CentroidError,
    ConfigError,
    GapViolation,
    MeshingFailure,
    RegionTag,
    SolidShape,
)
from .importers import read_mesh_arrays

logger = logging.getLogger(__name__)

NORMAL_ORIENTATION = "interface normals point out of the fluid, into the solid"

# sampling used for arc-length parametrisations of the boundary curves
_ARC_SAMPLES = 4096


@dataclass(frozen=True)
class GeometryConfig:
    """Geometry and material constants of the reference configuration.

    Attributes
    ----------
    container_radius : float
        Radius b of the container.
    solid_shape : SolidShape
    solid_radius : float
        Radius a of a disk-shaped solid.
    solid_semi_axes : Tuple[float, float]
        Semi axes (a1, a2) of an elliptic solid, aligned with the coordinate axes.
    solid_center : Tuple[float, float]
        Centre of the solid. Only the origin is admissible; any other value is
        rejected by build_geometry.
    solid_density : float
    viscosity : float
    mesh_size : float
        Target element diameter h.
    quality_floor : float
        Minimum admissible triangle angle in degrees.
    """

    container_radius: float = 1.0
    solid_shape: SolidShape = SolidShape.DISK
    solid_radius: Optional[float] = 0.3
    solid_semi_axes: Optional[Tuple[float, float]] = None
    solid_center: Tuple[float, float] = (0.0, 0.0)
    solid_density: float = 1.0
    viscosity: float = 0.1
    mesh_size: float = 0.05
    quality_floor: float = 20.0

    def __post_init__(self):
        if isinstance(self.solid_shape, str):
            object.__setattr__(
                self, "solid_shape", SolidShape.from_string(self.solid_shape)
            )
        if self.solid_semi_axes is not None:
            object.__setattr__(
                self, "solid_semi_axes", tuple(float(x) for x in self.solid_semi_axes)
            )
        object.__setattr__(
            self, "solid_center", tuple(float(x) for x in self.solid_center)
        )

        _require_positive("Geometry.Container Radius", self.container_radius)
        _require_positive("Geometry.Solid Density", self.solid_density)
        _require_positive("Geometry.Viscosity", self.viscosity)
        _require_positive("Discretization.Mesh Size", self.mesh_size)
        if not 0.0 < self.quality_floor < 60.0:
            raise ConfigError(
                "Discretization.Quality Floor",
                f"must lie in (0, 60) degrees, got {self.quality_floor}",
            )

        if self.solid_shape is SolidShape.DISK:
            if self.solid_radius is None:
                raise ConfigError("Geometry.Solid Radius", "required for a disk")
            _require_positive("Geometry.Solid Radius", self.solid_radius)
        else:
            if self.solid_semi_axes is None or len(self.solid_semi_axes) != 2:
                raise ConfigError(
                    "Geometry.Solid Semi Axes", "an ellipse needs two semi axes"
                )
            for axis in self.solid_semi_axes:
                _require_positive("Geometry.Solid Semi Axes", axis)

    def solid_boundary_radius(self, theta: np.ndarray) -> np.ndarray:
        """Polar description r(θ) of the solid boundary about the origin."""
        theta = np.asarray(theta, dtype=float)
        if self.solid_shape is SolidShape.DISK:
            return np.full_like(theta, self.solid_radius)
        a1, a2 = self.solid_semi_axes
        return a1 * a2 / np.sqrt((a2 * np.cos(theta)) ** 2 + (a1 * np.sin(theta)) ** 2)

    @cached_property
    def max_solid_radius(self) -> float:
        if self.solid_shape is SolidShape.DISK:
            return float(self.solid_radius)
        return float(max(self.solid_semi_axes))

    @cached_property
    def solid_perimeter(self) -> float:
        theta = np.linspace(0.0, 2.0 * np.pi, _ARC_SAMPLES + 1)
        points = _polar_points(self.solid_boundary_radius(theta), theta)
        return float(np.linalg.norm(np.diff(points, axis=0), axis=1).sum())

    @cached_property
    def solid_area(self) -> float:
        if self.solid_shape is SolidShape.DISK:
            return float(np.pi * self.solid_radius**2)
        return float(np.pi * np.prod(self.solid_semi_axes))

    @property
    def gap(self) -> float:
        """Distance between the container wall and the solid."""
        offset = float(np.hypot(*self.solid_center))
        return self.container_radius - (offset + self.max_solid_radius)

    @property
    def diameter(self) -> float:
        return 2.0 * self.container_radius

    @property
    def tol_geom(self) -> float:
        """Geometric tolerance 10·h² scaled by the container diameter."""
        return 10.0 * self.mesh_size**2 / self.diameter

    @classmethod
    def from_yaml_dict(
        cls, geometry: Dict, discretization: Optional[Dict] = None
    ) -> Self:
        """Builds a GeometryConfig from the Geometry and Discretization sections of
        an experiment record.

        Parameters
        ----------
        geometry : Dict
        discretization : Optional[Dict]

        Returns
        -------
        GeometryConfig
        """
        discretization = discretization or {}
        kwargs = {}
        for key, name in (
            ("Container Radius", "container_radius"),
            ("Solid Shape", "solid_shape"),
            ("Solid Radius", "solid_radius"),
            ("Solid Semi Axes", "solid_semi_axes"),
            ("Solid Center", "solid_center"),
            ("Solid Density", "solid_density"),
            ("Viscosity", "viscosity"),
        ):
            if key in geometry:
                kwargs[name] = geometry[key]
        for key, name in (
            ("Mesh Size", "mesh_size"),
            ("Quality Floor", "quality_floor"),
        ):
            if key in discretization:
                kwargs[name] = discretization[key]
        return cls(**kwargs)


def _require_positive(name: str, value) -> None:
    try:
        ok = float(value) > 0.0
    except (TypeError, ValueError):
        raise ConfigError(name, f"expected a number, got {value!r}")
    if not ok:
        raise ConfigError(name, f"must be positive, got {value}")


def _polar_points(radius: np.ndarray, theta: np.ndarray) -> np.ndarray:
    return np.column_stack((radius * np.cos(theta), radius * np.sin(theta)))


def build_geometry(config: GeometryConfig) -> GeometryConfig:
    """Validates the geometric invariants of a parsed configuration.

    Parameters
    ----------
    config : GeometryConfig

    Returns
    -------
    GeometryConfig
        The same (immutable) configuration.

    Raises
    ------
    GapViolation
        Raised if the solid touches or leaves the container.
    CentroidError
        Raised if the solid centroid is not at the origin.
    """
    if config.gap <= 0.0:
        raise GapViolation(
            f"solid reaches radius {config.container_radius - config.gap:.6g} but the "
            f"container radius is {config.container_radius:.6g}"
        )
    offset = float(np.hypot(*config.solid_center))
    if offset > config.tol_geom:
        raise CentroidError(
            f"solid centroid {config.solid_center} is off the origin by {offset:.3e} "
            f"(tolerance {config.tol_geom:.3e})"
        )
    logger.info(
        "geometry: %s solid, gap %.4g, tol_geom %.2e",
        config.solid_shape.value,
        config.gap,
        config.tol_geom,
    )
    return config


@dataclass(frozen=True)
class Mesh:
    """Conforming triangulation of the fluid and solid regions.

    Attributes
    ----------
    vertices : np.ndarray
        (n_vertices, 2) coordinates.
    triangles : np.ndarray
        (n_triangles, 3) vertex indices, positively oriented.
    triangle_tags : np.ndarray
        RegionTag value of every triangle.
    boundary_edges : np.ndarray
        (n_edges, 2) vertex pairs on the container wall and on the interface.
        Interface edges run counter-clockwise around the solid.
    edge_tags : np.ndarray
        BoundaryTag value of every boundary edge.
    normal_orientation : str
    """

    vertices: np.ndarray
    triangles: np.ndarray
    triangle_tags: np.ndarray
    boundary_edges: np.ndarray
    edge_tags: np.ndarray
    normal_orientation: str = field(default=NORMAL_ORIENTATION)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @cached_property
    def signed_areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    @cached_property
    def angles(self) -> np.ndarray:
        """(n_triangles, 3) interior angles in degrees."""
        p = self.vertices[self.triangles]
        out = np.empty(self.triangles.shape)
        for corner in range(3):
            u = p[:, (corner + 1) % 3] - p[:, corner]
            v = p[:, (corner + 2) % 3] - p[:, corner]
            cosine = np.einsum("ij,ij->i", u, v) / (
                np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1)
            )
            out[:, corner] = np.degrees(np.arccos(np.clip(cosine, -1.0, 1.0)))
        return out

    @property
    def min_angle(self) -> float:
        return float(self.angles.min())

    @cached_property
    def mesh_size(self) -> float:
        """Mean edge length of the triangulation."""
        p = self.vertices[self.triangles]
        lengths = np.linalg.norm(p - np.roll(p, -1, axis=1), axis=2)
        return float(lengths.mean())

    @property
    def tol_geom(self) -> float:
        diameter = 2.0 * float(np.linalg.norm(self.vertices, axis=1).max())
        return 10.0 * self.mesh_size**2 / diameter

    def region(self, tag: RegionTag) -> np.ndarray:
        """Triangles carrying the given region tag."""
        return self.triangles[self.triangle_tags == int(tag)]

    def edges(self, tag: BoundaryTag) -> np.ndarray:
        return self.boundary_edges[self.edge_tags == int(tag)]

    @property
    def interface_edges(self) -> np.ndarray:
        return self.edges(BoundaryTag.INTERFACE)

    @property
    def outer_edges(self) -> np.ndarray:
        return self.edges(BoundaryTag.OUTER)

    def region_area(self, tag: RegionTag) -> float:
        return float(self.signed_areas[self.triangle_tags == int(tag)].sum())

    def boundary_length(self, tag: BoundaryTag) -> float:
        p = self.vertices[self.edges(tag)]
        return float(np.linalg.norm(p[:, 1] - p[:, 0], axis=1).sum())

    def interface_normals(self) -> np.ndarray:
        """Unit normal of every interface edge, exterior to the fluid."""
        p = self.vertices[self.interface_edges]
        d = p[:, 1] - p[:, 0]
        normals = np.column_stack((-d[:, 1], d[:, 0]))
        return normals / np.linalg.norm(normals, axis=1)[:, None]

    def translated(self, shift) -> Self:
        """Copy of the mesh with every vertex moved by shift."""
        return Mesh(
            vertices=self.vertices + np.asarray(shift, dtype=float),
            triangles=self.triangles,
            triangle_tags=self.triangle_tags,
            boundary_edges=self.boundary_edges,
            edge_tags=self.edge_tags,
        )

    def check(self, quality_floor: float = 0.0) -> Self:
        """Verifies the structural invariants of the mesh.

        Parameters
        ----------
        quality_floor : float
            Minimum admissible angle in degrees.

        Returns
        -------
        Mesh
            self, for chaining.

        Raises
        ------
        MeshingFailure
        """
        if np.any(self.signed_areas <= 0.0):
            bad = int(np.count_nonzero(self.signed_areas <= 0.0))
            raise MeshingFailure(f"{bad} triangles are degenerate or inverted")

        if not np.isin(self.triangle_tags, [int(t) for t in RegionTag]).all():
            raise MeshingFailure("unknown triangle tag")
        if not np.isin(self.edge_tags, [int(t) for t in BoundaryTag]).all():
            raise MeshingFailure("unknown boundary edge tag")
        for tag in RegionTag:
            if not np.any(self.triangle_tags == int(tag)):
                raise MeshingFailure(f"region {tag.name.lower()} is empty")

        counts = self._interface_edge_owners()
        if not np.all(counts == 1):
            raise MeshingFailure(
                "interface edges must border exactly one fluid and one solid triangle"
            )

        orientation = np.einsum(
            "ij,ij->i",
            self.interface_normals(),
            self.vertices[self.interface_edges].mean(axis=1),
        )
        if np.any(orientation >= 0.0):
            raise MeshingFailure("interface edges are not counter-clockwise")

        if self.min_angle < quality_floor:
            raise MeshingFailure(
                f"minimum angle {self.min_angle:.2f} deg is below the quality floor "
                f"{quality_floor:.2f} deg"
            )
        return self

    def _interface_edge_owners(self) -> np.ndarray:
        """(n_interface_edges, 2) number of fluid and solid triangles per edge."""
        n = self.n_vertices
        local = self.triangles[:, [[0, 1], [1, 2], [2, 0]]]
        keys = np.sort(local, axis=2)
        keys = keys[..., 0] * n + keys[..., 1]
        iface = np.sort(self.interface_edges, axis=1)
        iface_keys = iface[:, 0] * n + iface[:, 1]
        counts = np.zeros((len(iface_keys), 2), dtype=int)
        for column, tag in enumerate((RegionTag.FLUID, RegionTag.SOLID)):
            region_keys = keys[self.triangle_tags == int(tag)].ravel()
            counts[:, column] = np.array(
                [np.count_nonzero(region_keys == k) for k in iface_keys]
            )
        return counts

    def save(self, path: Union[Path, str]):
        from .exporters import write_mesh

        write_mesh(self, path)

    @classmethod
    def from_path(cls, path: Union[Path, str]) -> Self:
        """Imports a mesh written in the ``mesh2d v1`` text format."""
        vertices, triangles, triangle_tags, edges, edge_tags = read_mesh_arrays(path)
        return cls(
            vertices=vertices,
            triangles=triangles,
            triangle_tags=triangle_tags,
            boundary_edges=edges,
            edge_tags=edge_tags,
        )


def _arc_length_angles(radius_fn, n: int, offset: float) -> np.ndarray:
    """n polar angles equally spaced in arc length along θ ↦ radius_fn(θ),
    shifted by offset (a fraction of one spacing)."""
    theta = np.linspace(0.0, 2.0 * np.pi, _ARC_SAMPLES + 1)
    points = _polar_points(radius_fn(theta), theta)
    steps = np.linalg.norm(np.diff(points, axis=0), axis=1)
    arc = np.concatenate(([0.0], np.cumsum(steps)))
    targets = (np.arange(n) + offset) / n * arc[-1]
    return np.interp(targets, arc, theta)


def generate_mesh(config: GeometryConfig) -> Mesh:
    """Triangulates the solid and the fluid annulus.

    Points are laid out on rings: scaled copies of the solid boundary inside the
    solid (with one point at the centre), the solid boundary itself, blends of
    the solid boundary and the container wall in the fluid, and the container
    wall. Ring point counts follow perimeter / h and every other ring is
    staggered by half a spacing. The point cloud is triangulated by Delaunay;
    because the interface ring is shared by both regions, the triangulation is
    conforming across the interface.

    Parameters
    ----------
    config : GeometryConfig
        A validated geometry.

    Returns
    -------
    Mesh

    Raises
    ------
    MeshingFailure
        Raised if the triangulation misses an interface edge, contains a
        degenerate element or violates the quality floor.
    """
    h = config.mesh_size
    b = config.container_radius
    radius = config.solid_boundary_radius

    n_interface = max(8, int(round(config.solid_perimeter / h)))
    mean_radius = config.solid_perimeter / (2.0 * np.pi)
    n_solid_rings = max(1, int(round(mean_radius / h)))
    n_fluid_rings = max(1, int(round((b - mean_radius) / h)))

    chunks = [np.zeros((1, 2))]
    # 0 solid interior, 1 interface, 2 fluid interior, 3 container wall
    side = [np.zeros(1, dtype=int)]

    for k in range(1, n_solid_rings):
        s = k / n_solid_rings
        n_k = max(6, int(round(s * n_interface)))
        theta = _arc_length_angles(radius, n_k, 0.5 * (k % 2))
        chunks.append(_polar_points(s * radius(theta), theta))
        side.append(np.zeros(n_k, dtype=int))

    theta = _arc_length_angles(radius, n_interface, 0.0)
    interface_start = sum(len(c) for c in chunks)
    chunks.append(_polar_points(radius(theta), theta))
    side.append(np.ones(n_interface, dtype=int))

    for j in range(1, n_fluid_rings + 1):
        t = j / n_fluid_rings
        perimeter = (1.0 - t) * config.solid_perimeter + t * 2.0 * np.pi * b
        n_j = max(n_interface, int(round(perimeter / h)))

        def blend(angle, t=t):
            return (1.0 - t) * radius(angle) + t * b

        offset = 0.0 if j == n_fluid_rings else 0.5 * (j % 2)
        theta = _arc_length_angles(blend, n_j, offset)
        chunks.append(_polar_points(blend(theta), theta))
        side.append(np.full(n_j, 3 if j == n_fluid_rings else 2, dtype=int))

    vertices = np.vstack(chunks)
    side = np.concatenate(side)
    outer_start = len(vertices) - len(chunks[-1])

    try:
        triangulation = Delaunay(vertices)
    except Exception as ex:  # qhull raises its own error type
        raise MeshingFailure(f"Delaunay triangulation failed: {ex}")

    triangles = triangulation.simplices.astype(np.int64)
    p = vertices[triangles]
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    signed = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    triangles = triangles[np.abs(signed) > 1e-14 * h * h]
    signed = signed[np.abs(signed) > 1e-14 * h * h]
    flip = signed < 0.0
    triangles[flip] = triangles[flip][:, [0, 2, 1]]

    # convex solid: a triangle with no fluid-side vertex lies inside the polygon
    in_solid = np.all(side[triangles] <= 1, axis=1)
    triangle_tags = np.where(in_solid, int(RegionTag.SOLID), int(RegionTag.FLUID))

    interface = np.arange(interface_start, interface_start + n_interface)
    outer = np.arange(outer_start, len(vertices))
    boundary_edges = np.vstack(
        (
            np.column_stack((outer, np.roll(outer, -1))),
            np.column_stack((interface, np.roll(interface, -1))),
        )
    )
    edge_tags = np.concatenate(
        (
            np.full(len(outer), int(BoundaryTag.OUTER)),
            np.full(n_interface, int(BoundaryTag.INTERFACE)),
        )
    )

    mesh = Mesh(
        vertices=vertices,
        triangles=triangles,
        triangle_tags=triangle_tags,
        boundary_edges=boundary_edges,
        edge_tags=edge_tags,
    )
    mesh.check(config.quality_floor)
    logger.info(
        "mesh: %d vertices, %d fluid / %d solid triangles, min angle %.1f deg",
        mesh.n_vertices,
        int(np.count_nonzero(triangle_tags == int(RegionTag.FLUID))),
        int(np.count_nonzero(triangle_tags == int(RegionTag.SOLID))),
        mesh.min_angle,
    )
    return mesh


@dataclass(frozen=True)
class RigidBodyData:
    """Mass, inertia and centroid of the solid.

    Attributes
    ----------
    mass : float
        M = ρ_S·area.
    inertia : float
        I₀ = ρ_S ∫|y|² dy.
    centroid : np.ndarray
    area : float
    density : float
    """

    mass: float
    inertia: float
    centroid: np.ndarray
    area: float
    density: float

    @property
    def diagonal(self) -> np.ndarray:
        """Rigid inertia in (h′₁, h′₂, ω) coordinates."""
        return np.array([self.mass, self.mass, self.inertia])


def solid_moments(
    mesh: Mesh, density: float, tol_geom: Optional[float] = None
) -> RigidBodyData:
    """Computes mass, inertia and centroid of the meshed solid. The integrals are
    exact on the polygonal solid.

    Parameters
    ----------
    mesh : Mesh
    density : float
        ρ_S > 0.
    tol_geom : Optional[float]
        Centroid tolerance; by default derived from the mesh size.

    Returns
    -------
    RigidBodyData

    Raises
    ------
    CentroidError
        Raised if the centroid lies farther than tol_geom from the origin.
    """
    if density <= 0.0:
        raise ConfigError("Geometry.Solid Density", f"must be positive, got {density}")

    solid = mesh.triangle_tags == int(RegionTag.SOLID)
    p = mesh.vertices[mesh.triangles[solid]]
    areas = mesh.signed_areas[solid]
    area = float(areas.sum())

    first = (areas[:, None] * p.mean(axis=1)).sum(axis=0)
    centroid = first / area

    # ∫_T |y|² = |T|/6 (Σ|p_i|² + Σ_{i<j} p_i·p_j)
    squares = np.einsum("tij,tij->t", p, p)
    cross = (
        np.einsum("ti,ti->t", p[:, 0], p[:, 1])
        + np.einsum("ti,ti->t", p[:, 1], p[:, 2])
        + np.einsum("ti,ti->t", p[:, 0], p[:, 2])
    )
    second = float((areas * (squares + cross)).sum() / 6.0)

    tol = mesh.tol_geom if tol_geom is None else tol_geom
    if np.linalg.norm(centroid) > tol:
        raise CentroidError(
            f"solid centroid {centroid} is off the origin by "
            f"{np.linalg.norm(centroid):.3e} (tolerance {tol:.3e})"
        )

    return RigidBodyData(
        mass=density * area,
        inertia=density * second,
        centroid=centroid,
        area=area,
        density=density,
    )

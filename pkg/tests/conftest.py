import numpy as np
import pytest

from fsi_toolbox.coupled_operators import assemble_block_system
from fsi_toolbox.discretization import assemble_forms, build_spaces
from fsi_toolbox.geometry import (
    GeometryConfig,
    build_geometry,
    generate_mesh,
    solid_moments,
)
from fsi_toolbox.spectral import solve_eigs, split_spectrum
from fsi_toolbox.stabilization import (
    assemble_B,
    build_control_basis,
    design_feedback,
    projected_input,
)

# concentric disks a=0.3, b=1.0 on a coarse mesh
COARSE_H = 0.1
VISCOSITY = 0.1


@pytest.fixture(scope="session")
def geometry():
    return build_geometry(GeometryConfig(mesh_size=COARSE_H, viscosity=VISCOSITY))


@pytest.fixture(scope="session")
def mesh(geometry):
    return generate_mesh(geometry)


@pytest.fixture(scope="session")
def rigid(mesh):
    return solid_moments(mesh, 1.0)


@pytest.fixture(scope="session")
def spaces(mesh):
    return build_spaces(mesh, rng=np.random.default_rng(0))


@pytest.fixture(scope="session")
def forms(spaces):
    return assemble_forms(spaces, VISCOSITY)


@pytest.fixture(scope="session")
def blocks(spaces, forms, rigid):
    return assemble_block_system(spaces, forms, rigid)


@pytest.fixture(scope="session")
def decomposition(blocks):
    return solve_eigs(blocks, 10, rng=np.random.default_rng(0))


@pytest.fixture(scope="session")
def decay_rate(decomposition):
    return 1.5 * abs(decomposition.eigenvalues[0])


@pytest.fixture(scope="session")
def subspace(blocks, decomposition, decay_rate):
    return split_spectrum(decomposition, decay_rate, blocks.mass)


@pytest.fixture(scope="session")
def basis(blocks):
    return build_control_basis(blocks.operators, 6)


@pytest.fixture(scope="session")
def inputs(blocks, basis, subspace, decay_rate):
    injection = assemble_B(basis, blocks, decay_rate)
    return projected_input(subspace, injection, basis, blocks)


@pytest.fixture(scope="session")
def gain(blocks, subspace, inputs):
    return design_feedback(subspace, inputs, blocks)

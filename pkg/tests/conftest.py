import numpy as np
import pytest

from gridsense.channel import Geometry, ReflectionTable


def make_geometry(n_side=2, m_grids=4, wavelength=0.1, noise_power=1e-12,
                  power=1.0, spacing=0.3, grid_spacing=0.3, target_x=0.6):
    """Small desk-scale geometry: n_side^2 widely pitched elements in the
    y-z plane, m_grids grid centers in front of the surface. The wide
    pitch and near target keep the reflection paths well separated."""
    offsets = (np.arange(n_side) - (n_side - 1) / 2.0) * spacing
    ys, zs = np.meshgrid(offsets, offsets)
    elements = np.column_stack([np.zeros(n_side * n_side), ys.ravel(), zs.ravel()])
    # lattice cells ordered outward from the axis, half-cell centred
    cells = [((iy + 0.5) * grid_spacing, (iz + 0.5) * grid_spacing)
             for iy in range(-3, 3) for iz in range(-3, 3)]
    cells.sort(key=lambda c: (c[0] ** 2 + c[1] ** 2, c[0], c[1]))
    grid = np.array([[target_x, y, z] for y, z in cells[:m_grids]])
    return Geometry(tx_position=[0.87, -0.84, 0.0], rx_position=[0.0, 0.0, -0.5],
                    element_positions=elements, grid_centers=grid,
                    wavelength=wavelength, power=power, noise_power=noise_power)


@pytest.fixture
def tiny_geom():
    return make_geometry()


@pytest.fixture
def two_state_table():
    return ReflectionTable.uniform_phases(2)

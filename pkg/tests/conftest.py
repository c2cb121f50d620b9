import numpy as np
import pytest

from piezoq.materials import builtin_material, isotropic_material

# Isotropic test solid: Lame lambda = 50 GPa, mu = 25 GPa, rho = 5000 kg/m^3.
LAME, MU, RHO = 50e9, 25e9, 5000.0


@pytest.fixture(scope="session")
def iso():
    return isotropic_material("iso", LAME, MU, RHO)


@pytest.fixture(scope="session")
def iso_metal():
    return isotropic_material("iso-metal", LAME, MU, RHO, kind="metal")


@pytest.fixture(scope="session")
def six_mm():
    return builtin_material("synthetic_6mm")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)

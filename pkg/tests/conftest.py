import numpy as np
import pytest

from periflow.geometry import build_wall_geometry
from periflow.kernels import KernelContext
from periflow import periodize as pz

D = 2.0 * np.pi
ALPHA = 0.2
MU = 0.7
P_DRIVE = 2.0 * ALPHA * MU * D


@pytest.fixture(scope="session")
def ctx():
    return KernelContext(mu=MU)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def flat_small(ctx):
    """Flat channel at modest resolution with a dense ELS solver."""
    walls = build_wall_geometry("flat", 128, 16, d=D, h=1.0)
    proxy = pz.build_proxy_basis(walls, 64)
    solver = pz.DenseElsSolver(pz.assemble_els(walls, proxy, ctx))
    return walls, proxy, solver


@pytest.fixture(scope="session")
def sine_small(ctx):
    walls = build_wall_geometry("sine", 192, 24, d=D, h=1.0, a=0.3, k=1)
    proxy = pz.build_proxy_basis(walls, 96)
    solver = pz.DenseElsSolver(pz.assemble_els(walls, proxy, ctx))
    return walls, proxy, solver

import numpy as np
import pytest

from elastodyn.dynamics import Simulation
from elastodyn.field import box_field
from elastodyn.material import MaterialParams
from elastodyn.sampling import build_ip_set, poisson_disk_sample, select_kernels


@pytest.fixture(scope="session")
def box_scene():
    """Small box proxy shared by dynamics/render tests: ~250 particles,
    6 kernels, 16 IPs."""
    field = box_field([0.5, 0.5, 0.5], falloff=0.2)
    cloud = poisson_disk_sample(field, 0.2, 2.0, seed=3)
    kernels = select_kernels(cloud, 6, seed=1)
    ips = build_ip_set(cloud, kernels, m_extra=10)
    return field, cloud, kernels, ips


@pytest.fixture(scope="session")
def tiny_scene():
    """Very small proxy for expensive FD sweeps: 3 kernels, 6 IPs."""
    field = box_field([0.5, 0.5, 0.5], falloff=0.25)
    cloud = poisson_disk_sample(field, 0.26, 2.0, seed=11)
    kernels = select_kernels(cloud, 3, seed=2)
    ips = build_ip_set(cloud, kernels, m_extra=3)
    return field, cloud, kernels, ips


def make_sim(scene, model="neo_hookean", **kw):
    _, cloud, kernels, ips = scene
    defaults = dict(E=2.0e3, nu=0.3, beta=800.0, rho=100.0)
    params = MaterialParams(model=model, **defaults)
    kw.setdefault("dt", 0.01)
    kw.setdefault("gravity", (0.0, 0.0, -9.8))
    return Simulation(cloud, kernels, ips, params, **kw)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20240817)

import numpy as np
import pytest

from cwlate.core import RddDataset
from cwlate.simulation import McConfig, dgp_sample


def simulated(n: int, alpha_dw: float = 1.0, beta_xw: float = 2.0, seed: int = 0, rep: int = 0):
    cfg = McConfig(alpha_dw=alpha_dw, beta_xw=beta_xw, n=n, reps=1, seed=seed)
    return dgp_sample(cfg, rep)


def step_dataset(m: int = 2, per_side: int = 40, noise: float = 0.0, seed: int = 0) -> RddDataset:
    """Evenly spaced z on (-1, 1) in every cell with unit jumps in X and Y."""
    rng = np.random.default_rng(seed)
    z_side = (np.arange(per_side) + 0.5) / per_side
    z = np.concatenate([-z_side, z_side])
    zs, cells = [], []
    for j in range(m):
        zs.append(z)
        cells.append(np.full(len(z), j))
    z = np.concatenate(zs)
    cell = np.concatenate(cells)
    d = (z >= 0).astype(float)
    y = d + noise * rng.standard_normal(len(z))
    return RddDataset(y=y, x=d, z=z, cell=cell)


@pytest.fixture(scope="module")
def dgp_data():
    return simulated(5000, seed=11)

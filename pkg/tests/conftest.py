import numpy as np
import pytest

from swarm_mpc import autodiff as ad
from swarm_mpc.autodiff import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def central_diff_grad(f, x0: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Dense central-difference gradient of a scalar function of an array."""
    g = np.zeros_like(x0)
    it = np.nditer(x0, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        xp = x0.copy()
        xp[idx] += h
        xm = x0.copy()
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2.0 * h)
    return g


def tape_grad(build, x0: np.ndarray) -> np.ndarray:
    """Gradient of build(Tensor) -> scalar Tensor via the reverse tape."""
    leaf = Tensor(x0, requires_grad=True)
    (g,) = ad.backward(build(leaf), [leaf])
    return g


def rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-3) -> float:
    """Per-element relative error with an absolute floor.

    Central differences carry ~1e-16*|f|/h of roundoff noise, so entries far
    below the floor are effectively compared absolutely at floor*tolerance.
    """
    denom = np.maximum(np.abs(a) + np.abs(b), floor)
    return float(np.max(np.abs(a - b) / denom))

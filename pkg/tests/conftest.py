import numpy as np
import pytest


def finite_diff(fn, arrays, step=1e-5):
    """Central-difference gradient of scalar fn w.r.t. each array in `arrays`.

    fn is called with the (mutated in place) list and must return a float.
    """
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat = a.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = fn(arrays)
            flat[i] = orig - step
            fm = fn(arrays)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * step)
        grads.append(g)
    return grads


def rel_err(analytic, fd):
    """Max over coordinates of |a - f| / max(1, |f|)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    fd = np.asarray(fd, dtype=np.float64)
    return float(np.max(np.abs(analytic - fd) / np.maximum(1.0, np.abs(fd))))


@pytest.fixture
def rng():
    return np.random.default_rng(0)

import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def central_diff(fn, x0: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of a scalar function of a vector."""
    x0 = np.asarray(x0, dtype=np.float64)
    grad = np.empty_like(x0)
    for i in range(x0.size):
        xp = x0.copy()
        xm = x0.copy()
        xp[i] += step
        xm[i] -= step
        grad[i] = (fn(xp) - fn(xm)) / (2.0 * step)
    return grad


def assert_grad_close(analytic: np.ndarray, numeric: np.ndarray,
                      rtol: float = 1e-4, atol: float = 1e-7) -> None:
    analytic = np.asarray(analytic).ravel()
    numeric = np.asarray(numeric).ravel()
    err = np.abs(analytic - numeric)
    tol = atol + rtol * np.abs(numeric)
    worst = np.argmax(err - tol)
    assert np.all(err <= tol), (
        f"gradient mismatch at flat index {worst}: "
        f"analytic={analytic[worst]!r} numeric={numeric[worst]!r} "
        f"abs err={err[worst]:.3e} tol={tol[worst]:.3e}"
    )

import numpy as np


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute difference scaled by the overall gradient magnitude."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


def central_diff(f, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function over an array."""
    grad = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + step
        up = f(x)
        x[idx] = orig - step
        down = f(x)
        x[idx] = orig
        grad[idx] = (up - down) / (2.0 * step)
    return grad

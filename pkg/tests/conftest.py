import numpy as np
import pytest

from varmae.tensor import Tensor, no_grad


def finite_diff(loss_fn, tensor: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar loss w.r.t. every element."""
    flat = tensor.data.reshape(-1)
    out = np.empty_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_fn().item()
            flat[i] = orig - step
            down = loss_fn().item()
            flat[i] = orig
            out[i] = (up - down) / (2.0 * step)
    return out.reshape(tensor.data.shape)


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Worst relative disagreement; entries where both are below `floor` count as 0."""
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.abs(a), np.abs(b))
    rel = np.where(scale > floor, np.abs(a - b) / np.maximum(scale, 1e-300), 0.0)
    return float(rel.max()) if rel.size else 0.0


def grad_or_zeros(tensor: Tensor) -> np.ndarray:
    return tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

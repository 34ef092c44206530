"""Central finite differences for the gradient tests."""
import numpy as np


def numeric_grad(f, arr, h=1e-3):
    """d f() / d arr by central differences, perturbing ``arr`` in place."""
    g = np.zeros(arr.shape, dtype=np.float64)
    it = np.nditer(arr, flags=["multi_index"], op_flags=["readwrite"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + h
        fp = f()
        arr[i] = old - h
        fm = f()
        arr[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b):
    """Max abs difference over the larger max magnitude (floored at 1e-6,
    for gradients that are analytically zero)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-6))

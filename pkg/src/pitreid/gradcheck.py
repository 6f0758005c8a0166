"""Central finite-difference gradients used as an independent oracle."""
import numpy as np

from .tensor import no_grad


def numerical_grad(fn, param, step=1e-5, indices=None):
    """Central differences of scalar ``fn()`` w.r.t. entries of ``param.data``.

    ``fn`` is re-evaluated with ``param.data`` perturbed in place; the entry is
    restored afterwards. ``indices`` limits the check to some flat positions.
    """
    flat = param.data.reshape(-1)
    grad = np.zeros_like(flat)
    positions = range(flat.size) if indices is None else indices
    with no_grad():
        for i in positions:
            orig = flat[i]
            flat[i] = orig + step
            plus = float(fn().data)
            flat[i] = orig - step
            minus = float(fn().data)
            flat[i] = orig
            grad[i] = (plus - minus) / (2.0 * step)
    return grad.reshape(param.shape)


def relative_error(analytic, numeric, floor=1e-6):
    """Norm-wise relative error ||a - n|| / max(||a||, ||n||, floor).

    The floor turns the comparison absolute for gradients that vanish by
    symmetry (e.g. a bias whose shift BatchNorm removes), where both sides
    are round-off.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / denom)

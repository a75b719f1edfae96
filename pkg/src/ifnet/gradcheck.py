import numpy as np

from .errors import NonScalarOutput, SkippedNondifferentiable
from .tensor import Graph, Tensor, no_grad


def grad_check(fn, point, step=1e-5, coords=None, kink_tol=None):
    """Max relative error between the taped gradient of ``fn`` and central differences.

    The error per coordinate is |analytic - numeric| / max(1, |analytic|, |numeric|).
    ``coords`` restricts the comparison to a subset of flat indices. Raises
    SkippedNondifferentiable when a hinge, max or min in ``fn`` sits within
    ``kink_tol`` (default 10 * step) of its kink at ``point``.
    """
    values = np.array(point.values if isinstance(point, Tensor) else point, dtype=np.float64)
    if kink_tol is None:
        kink_tol = 10 * step
    x = Tensor(values.copy(), requires_grad=True)
    graph = Graph()
    out = graph.forward(fn, [x])
    if out.size != 1:
        raise NonScalarOutput(f"grad_check needs a scalar output, got shape {out.shape}")
    margin = graph.kink_margin()
    if margin <= kink_tol:
        raise SkippedNondifferentiable(f"point lies {margin:.3g} from a kink")
    graph.backward(out)
    analytic = x.grad.reshape(-1)

    flat = values.reshape(-1)
    if coords is None:
        coords = range(flat.size)
    worst = 0.0
    with no_grad():
        for c in coords:
            orig = flat[c]
            flat[c] = orig + step
            up = fn(Tensor(values.copy())).item()
            flat[c] = orig - step
            down = fn(Tensor(values.copy())).item()
            flat[c] = orig
            numeric = (up - down) / (2 * step)
            a = analytic[c]
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    return worst

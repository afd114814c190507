"""Central finite-difference checks in float64."""

import numpy as np

from cptlab.core.tensor import Tensor, no_grad


def numeric_grad(f, arrays, i, eps=1e-6):
    x = arrays[i]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + eps
        hi = f(*arrays)
        x[idx] = old - eps
        lo = f(*arrays)
        x[idx] = old
        g[idx] = (hi - lo) / (2 * eps)
    return g


def rel_error(analytic, numeric):
    scale = max(np.max(np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def check_op(op, arrays, wrt=None):
    """Max relative error over the inputs listed in ``wrt`` for ``sum(op(*tensors) * w)``.

    ``w`` is a fixed random weighting so that the upstream gradient is not all ones.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    wrt = range(len(arrays)) if wrt is None else wrt
    probe = op(*[Tensor(a) for a in arrays])
    w = np.random.default_rng(99).normal(size=probe.shape)

    def scalar(*arrs):
        return float(np.sum(op(*[Tensor(a) for a in arrs]).data * w))

    ts = [Tensor(a.copy(), requires_grad=(i in wrt)) for i, a in enumerate(arrays)]
    out = op(*ts)
    (out * Tensor(w)).sum().backward()
    errs = []
    for i in wrt:
        errs.append(rel_error(ts[i].grad, numeric_grad(scalar, arrays, i)))
    return max(errs)


def check_model(model, loss_fn, eps=1e-6):
    """Every parameter of a float64 model against finite differences of ``loss_fn(model)``."""
    params = model.parameters()
    for p in params:
        p.grad = None
    loss_fn(model).backward()
    worst = 0.0
    for p in params:
        analytic = p.grad.copy()

        def scalar(_):
            with no_grad():
                return loss_fn(model).item()

        numeric = numeric_grad(scalar, [p.data], 0, eps)
        worst = max(worst, rel_error(analytic, numeric))
    return worst

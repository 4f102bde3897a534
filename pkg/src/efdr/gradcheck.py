"""Central finite-difference gradient checking for the autodiff engine."""
import numpy as np

from . import autodiff as ad


def rel_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def numeric_grad(f, arrays, i, h=1e-4, entries=None):
    """d f / d arrays[i] by central differences; ``entries`` limits the flat indices."""
    x = arrays[i]
    flat = x.reshape(-1)
    idx = range(flat.size) if entries is None else entries
    out = np.zeros(len(idx))
    for n, k in enumerate(idx):
        old = flat[k]
        flat[k] = old + h
        fp = f(*arrays)
        flat[k] = old - h
        fm = f(*arrays)
        flat[k] = old
        out[n] = (fp - fm) / (2 * h)
    return out


def check_op(op, *arrays, h=1e-4, seed=0):
    """Max relative error over all inputs of ``sum(w * op(...))`` with random w."""
    rng = np.random.default_rng(seed)
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    probe = None

    def scalar(*vals):
        nonlocal probe
        with ad.no_grad():
            out = op(*[ad.Tensor(v) for v in vals]).data
        if probe is None:
            probe = rng.normal(size=out.shape)
        return float(np.sum(out * probe))

    scalar(*arrays)
    tensors = [ad.Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = op(*tensors)
    ad.sum(ad.mul(out, ad.Tensor(probe))).backward()
    worst = 0.0
    for i, t in enumerate(tensors):
        num = numeric_grad(scalar, arrays, i, h)
        ana = np.zeros_like(arrays[i]) if t.grad is None else t.grad
        worst = max(worst, rel_error(num, ana))
    return worst

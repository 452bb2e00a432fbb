"""Central finite-difference gradient checks in float64."""
import numpy as np
import torch


def fd_gradient(f, x: torch.Tensor, h=1e-6, index=None):
    """Central differences of scalar f at x for the flat indices ``index`` (all if None)."""
    flat = x.detach().clone().reshape(-1)
    idx = range(flat.numel()) if index is None else index
    out = []
    for i in idx:
        old = flat[i].item()
        flat[i] = old + h
        fp = float(f(flat.reshape(x.shape)))
        flat[i] = old - h
        fm = float(f(flat.reshape(x.shape)))
        flat[i] = old
        out.append((fp - fm) / (2 * h))
    return np.array(out)


def analytic_gradient(f, x: torch.Tensor):
    x = x.detach().clone().requires_grad_(True)
    f(x).backward()
    return x.grad.detach().reshape(-1).numpy()


def relative_error(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


def check(f, x, h=1e-6):
    """Relative error between analytic and finite-difference gradients of f at x."""
    with torch.no_grad():
        num = fd_gradient(f, x, h)
    return relative_error(analytic_gradient(f, x), num)

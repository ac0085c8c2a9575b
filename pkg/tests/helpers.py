"""Shared numerical oracles for the test suite.

Everything here is deliberately independent of the package's own gradient
and log-determinant machinery: plain central finite differences assembled
into gradients or dense Jacobians.
"""

import torch


def fd_param_grads(loss_fn, params, eps=1e-5):
    """Central-difference gradient of a scalar callable w.r.t. each tensor."""
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat = p.view(-1)
            gflat = g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                lp = float(loss_fn())
                flat[i] = orig - eps
                lm = float(loss_fn())
                flat[i] = orig
                gflat[i] = (lp - lm) / (2 * eps)
            grads.append(g)
    return grads


def fd_jacobian(fn, x, eps=1e-6):
    """Dense Jacobian of a batched map fn: (B, n) -> (B, k), evaluated at x.

    Builds all 2n perturbed points and calls fn once, so fn must treat rows
    independently. Returns a (k, n) matrix.
    """
    x = x.reshape(-1)
    n = x.numel()
    pts = x.unsqueeze(0).repeat(2 * n, 1)
    ar = torch.arange(n)
    pts[ar, ar] += eps
    pts[n + ar, ar] -= eps
    with torch.no_grad():
        out = fn(pts)
    out = out.reshape(2 * n, -1)
    return (out[:n] - out[n:]).T / (2 * eps)


def max_rel_err(a, b, floor=1e-6):
    """Elementwise relative error with an absolute floor for tiny entries."""
    denom = torch.maximum(torch.maximum(a.abs(), b.abs()), torch.full_like(a, floor))
    return float(((a - b).abs() / denom).max())

"""Shared test utilities: finite-difference oracles and tensor comparison."""

import numpy as np
import torch


def finite_diff_grad(f, x: torch.Tensor, step: float = 1e-3) -> torch.Tensor:
    """Central finite differences of a scalar-valued f() with respect to x.

    x is modified in place element by element and restored; use float64
    tensors for meaningful comparisons at 1e-4 relative tolerance.
    """
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            f_plus = float(f())
            flat[i] = orig - step
            f_minus = float(f())
            flat[i] = orig
            gflat[i] = (f_plus - f_minus) / (2.0 * step)
    return grad


def finite_diff_single(f, param: torch.Tensor, index: tuple, step: float = 1e-3) -> float:
    """Central finite difference of scalar f() wrt one element of a parameter tensor."""
    with torch.no_grad():
        orig = param[index].item()
        param[index] = orig + step
        f_plus = float(f())
        param[index] = orig - step
        f_minus = float(f())
        param[index] = orig
    return (f_plus - f_minus) / (2.0 * step)


def max_rel_err(a: torch.Tensor, b: torch.Tensor, floor: float = 1e-6) -> float:
    """Largest element-wise relative error, floored to ignore ~zero entries."""
    denom = torch.maximum(a.abs(), b.abs()).clamp_min(floor)
    return float(((a - b).abs() / denom).max())


def rel_err_scalar(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def analytic_grad(loss_fn, x: torch.Tensor) -> torch.Tensor:
    """Autograd gradient of loss_fn(x) with respect to a fresh leaf copy of x."""
    leaf = x.detach().clone().requires_grad_(True)
    loss = loss_fn(leaf)
    loss.backward()
    return leaf.grad.detach().clone()


def random_image(rng: np.random.Generator, h: int, w: int, c: int = 3) -> np.ndarray:
    return rng.random((h, w, c), dtype=np.float64).astype(np.float32)

"""Shared test utilities: finite-difference gradient oracle and data makers."""

import numpy as np
import torch


def rand_image(rng: np.random.Generator, c: int, h: int, w: int) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, size=(c, h, w)).astype(np.float32)


def checkerboard_mask(h: int, w: int) -> np.ndarray:
    mask = np.indices((h, w)).sum(axis=0) % 2
    return mask.astype(np.float32)


def fd_gradient(f, x: torch.Tensor, h: float = 1e-6) -> torch.Tensor:
    """Central finite differences of a scalar function, element by element."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat_x = x.reshape(-1)
    flat_g = grad.reshape(-1)
    with torch.no_grad():
        for i in range(flat_x.numel()):
            orig = flat_x[i].item()
            flat_x[i] = orig + h
            hi = float(f(x))
            flat_x[i] = orig - h
            lo = float(f(x))
            flat_x[i] = orig
            flat_g[i] = (hi - lo) / (2.0 * h)
    return grad


def gradient_rel_err(f, x: torch.Tensor, h: float = 1e-6) -> float:
    """Relative L2 gap between the autograd gradient and central differences."""
    leaf = x.detach().clone().requires_grad_(True)
    f(leaf).backward()
    auto = leaf.grad.detach()
    fd = fd_gradient(f, x, h)
    denom = max(auto.norm().item(), fd.norm().item(), 1e-12)
    return (auto - fd).norm().item() / denom

"""Independent reference implementations used as test oracles.

Deliberately naive (loops, enumeration, finite differences) and kept apart
from the library code paths they check.
"""

import itertools

import numpy as np

from partcascade import tensor as tk


def matmul_triple_loop(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for j in range(n):
            for l in range(k):
                out[i, j] += float(a[i, l]) * float(b[l, j])
    return out


def chamfer_brute(a: np.ndarray, b: np.ndarray) -> float:
    total_ab = 0.0
    for p in a:
        best = min(float(np.sum((p - q) ** 2)) for q in b)
        total_ab += best
    total_ba = 0.0
    for q in b:
        best = min(float(np.sum((q - p) ** 2)) for p in a)
        total_ba += best
    return total_ab / len(a) + total_ba / len(b)


def emd_brute(a: np.ndarray, b: np.ndarray) -> float:
    n = len(a)
    assert n == len(b) and n <= 7
    best = np.inf
    for perm in itertools.permutations(range(n)):
        cost = sum(float(np.linalg.norm(a[i] - b[perm[i]])) for i in range(n))
        best = min(best, cost / n)
    return best


def finite_diff_grads(build_loss, tensor: tk.Tensor, coords, h: float = 1e-3):
    """Central finite differences of a scalar loss w.r.t. selected coords.

    ``build_loss`` re-runs the forward pass from current tensor data.
    """
    flat = tensor.data.reshape(-1)
    out = np.zeros(len(coords), dtype=np.float64)
    for j, idx in enumerate(coords):
        orig = flat[idx]
        flat[idx] = orig + h
        up = float(build_loss().data)
        flat[idx] = orig - h
        down = float(build_loss().data)
        flat[idx] = orig
        out[j] = (up - down) / (2.0 * h)
    return out


def fd_check(build_loss, tensors, rng: np.random.Generator,
             max_coords_per_tensor: int | None = None, h: float = 1e-3):
    """Compare autodiff grads against finite differences.

    Returns (n_checked, n_ok) where ok means relative error < 1e-4 against
    scale max(|fd|, |ad|, 1e-3).
    """
    for t in tensors:
        t.grad = None
    loss = build_loss()
    tk.backward(loss)
    grads = {id(t): (np.zeros_like(t.data) if t.grad is None else t.grad)
             for t in tensors}

    checked = ok = 0
    for t in tensors:
        n = t.data.size
        if max_coords_per_tensor is None or n <= max_coords_per_tensor:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=max_coords_per_tensor, replace=False)
        fd = finite_diff_grads(build_loss, t, coords, h)
        ad = grads[id(t)].reshape(-1)[coords]
        scale = np.maximum(np.maximum(np.abs(fd), np.abs(ad)), 1e-3)
        rel = np.abs(fd - ad) / scale
        checked += len(coords)
        ok += int(np.sum(rel < 1e-4))
    return checked, ok

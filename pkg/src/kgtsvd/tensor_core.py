"""Dense 3-way tensor algebra.

Tensors are plain ``numpy.ndarray`` objects of shape ``(d1, d2, d3)`` and
dtype float64. Flattenings use C (row-major) order, so the paired index of
the mode-1 flattening is ``(i2, i3) -> i2 * d3 + i3``; for mode 2 it is
``(i1, i3) -> i1 * d3 + i3`` and for mode 3 ``(i1, i2) -> i1 * d2 + i2``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_DENSIFY_CAP = 10**6


def as_tensor3(a, name: str = "tensor") -> np.ndarray:
    """Validate ``a`` as a finite 3-way float64 array and return it."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 3:
        raise ValueError(f"{name} must be 3-way, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def _check_same_dims(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")


def inner_product(a, b) -> float:
    a = as_tensor3(a, "a")
    b = as_tensor3(b, "b")
    _check_same_dims(a, b)
    return float(np.einsum("ijk,ijk->", a, b))


def frobenius_norm(a) -> float:
    a = as_tensor3(a)
    return float(np.sqrt(np.einsum("ijk,ijk->", a, a)))


def multilinear_form(a: np.ndarray, x1, x2, x3) -> float:
    """Contract ``a`` with one vector per mode."""
    return float(np.einsum("ijk,i,j,k->", a, x1, x2, x3))


def flatten(a, mode: int) -> np.ndarray:
    """Mode-``mode`` flattening (modes are 1-based)."""
    a = as_tensor3(a)
    if mode not in (1, 2, 3):
        raise ValueError(f"mode must be 1, 2 or 3, got {mode}")
    moved = np.moveaxis(a, mode - 1, 0)
    return moved.reshape(a.shape[mode - 1], -1)


def unflatten(matrix: np.ndarray, mode: int, dims: tuple[int, int, int]) -> np.ndarray:
    """Inverse of :func:`flatten`."""
    rest = [d for k, d in enumerate(dims) if k != mode - 1]
    arr = np.asarray(matrix).reshape(dims[mode - 1], *rest)
    return np.moveaxis(arr, 0, mode - 1)


def mode1_gram(x) -> np.ndarray:
    """Gram matrix of the mode-1 flattening, contracting over the first index.

    ``G[(i2, i3), (j2, j3)] = sum_i1 x[i1, i2, i3] * x[i1, j2, j3]``
    """
    x = as_tensor3(x)
    d1, d2, d3 = x.shape
    g = np.einsum("aij,akl->ijkl", x, x)
    return g.reshape(d2 * d3, d2 * d3)


def spectral_norm_estimate(
    a,
    restarts: int = 16,
    tol: float = 1e-8,
    max_iter: int = 500,
    seed: int = 0,
) -> float:
    """Lower-bound estimate of the tensor spectral norm.

    Runs higher-order power iteration (alternating normalized mode-vector
    updates) from ``restarts`` starting points and returns the best value
    of ``|a x1 x2 x3|`` found. The exact spectral norm is NP-hard, so this
    is a certified lower bound, not the norm itself. The first start is the
    HOSVD initialization; the rest are Gaussian with seeds ``seed + k``.
    """
    a = as_tensor3(a)
    if not np.any(a):
        return 0.0
    starts = [_hosvd_start(a)]
    for k in range(1, restarts):
        rng = np.random.default_rng(seed + k)
        starts.append(tuple(rng.standard_normal(d) for d in a.shape))
    best = 0.0
    for x1, x2, x3 in starts:
        value = _hopm(a, x1, x2, x3, tol, max_iter)
        best = max(best, value)
    return best


def _hosvd_start(a: np.ndarray):
    return tuple(np.linalg.svd(flatten(a, m), full_matrices=False)[0][:, 0] for m in (1, 2, 3))


def _hopm(a, x1, x2, x3, tol, max_iter) -> float:
    x2 = x2 / np.linalg.norm(x2)
    x3 = x3 / np.linalg.norm(x3)
    prev = -np.inf
    value = 0.0
    for _ in range(max_iter):
        v1 = np.einsum("ijk,j,k->i", a, x2, x3)
        n1 = np.linalg.norm(v1)
        if n1 == 0:
            return 0.0
        x1 = v1 / n1
        v2 = np.einsum("ijk,i,k->j", a, x1, x3)
        x2 = v2 / np.linalg.norm(v2)
        v3 = np.einsum("ijk,i,j->k", a, x1, x2)
        n3 = np.linalg.norm(v3)
        x3 = v3 / n3
        value = n3
        if abs(value - prev) <= tol * max(value, 1.0):
            break
        prev = value
    return float(value)


@dataclass(frozen=True)
class ProjectionOperator:
    """Product of per-mode orthogonal projectors ``U_k U_k^T``.

    Bases from a tensor SVD share one column count ``rank``; the identity
    operator may have a different count per mode.
    """

    bases: tuple[np.ndarray, np.ndarray, np.ndarray]

    def __post_init__(self):
        if len(self.bases) != 3 or any(np.ndim(b) != 2 for b in self.bases):
            raise ValueError("need three 2-D basis matrices")

    @property
    def ranks(self) -> tuple[int, int, int]:
        return tuple(b.shape[1] for b in self.bases)

    @property
    def rank(self) -> int:
        if len(set(self.ranks)) != 1:
            raise ValueError(f"bases have different column counts {self.ranks}")
        return self.ranks[0]

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(b.shape[0] for b in self.bases)

    def check_orthonormal(self, atol: float = 1e-8) -> bool:
        return all(np.allclose(b.T @ b, np.eye(b.shape[1]), atol=atol) for b in self.bases)

    @classmethod
    def identity(cls, dims) -> "ProjectionOperator":
        return cls(tuple(np.eye(d) for d in dims))

    @classmethod
    def empty(cls, dims) -> "ProjectionOperator":
        return cls(tuple(np.zeros((d, 0)) for d in dims))


def project(op: ProjectionOperator, a) -> np.ndarray:
    """Apply ``U_k U_k^T`` along each mode of ``a`` in turn."""
    a = as_tensor3(a)
    if op.dims != a.shape:
        raise ValueError(f"operator dims {op.dims} do not match tensor {a.shape}")
    out = a
    for mode, u in enumerate(op.bases):
        proj = u @ u.T
        out = np.moveaxis(np.tensordot(proj, out, axes=(1, mode)), 0, mode)
    return out


def mode_product(a, matrix, mode: int) -> np.ndarray:
    """Multiply ``a`` along ``mode`` (1-based) by ``matrix`` (new_dim x d_mode)."""
    a = as_tensor3(a)
    return np.moveaxis(np.tensordot(matrix, a, axes=(1, mode - 1)), 0, mode - 1)


def check_densify(dims, cap: int = DEFAULT_DENSIFY_CAP) -> None:
    size = int(np.prod(dims, dtype=np.int64))
    if size > cap:
        raise ValueError(f"dense tensor of dims {tuple(dims)} has {size} entries, above cap {cap}")

import numpy as np
import pytest


def random_orthonormal(rng, d, r):
    q, _ = np.linalg.qr(rng.standard_normal((d, r)))
    return q


def odeco_tensor(rng, dims, rank, sigma=None):
    """Orthogonally decomposable tensor with random orthonormal factors.

    Returns ``(tensor, sigma, factors)`` with ``sigma`` sorted descending.
    """
    factors = [random_orthonormal(rng, d, rank) for d in dims]
    if sigma is None:
        sigma = np.sort(rng.uniform(0.5, 5.0, rank))[::-1]
    sigma = np.asarray(sigma, dtype=float)
    tensor = np.einsum("r,ir,jr,kr->ijk", sigma, *factors)
    return tensor, sigma, factors


def outer3(u, v, w):
    return u[:, None, None] * v[None, :, None] * w[None, None, :]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def write_triples(path, lines):
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return path

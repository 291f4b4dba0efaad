"""Exact small-scale simulation of quantum top-n sampling from a tensor.

The pipeline loads row ``s`` of the mode-1 flattening into an amplitude
state through a binary-tree memory, builds the density operator of the
contracted tensor, estimates its eigenvalues on a discretized clock, keeps
the components whose squared singular value clears ``tau**2`` and samples
``(predicate, object)`` outcomes, post-selecting on the queried predicate.

Phase estimation is simulated at the eigenvalue level: the spectrum is
computed exactly and each eigenvalue is rounded to its clock bin, so the
discretization error stays visible without simulating gates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from .tensor_core import as_tensor3, flatten

HERMITIAN_ATOL = 1e-12
DEGENERACY_GAP = 1e-9
DEFAULT_DOUBLED_CAP = 4096


# --------------------------------------------------------------------------
# state preparation


@dataclass
class StateVector:
    """Complex amplitudes over a register, optionally with a shape for its index."""

    amplitudes: np.ndarray
    shape: tuple[int, ...] | None = None

    def __post_init__(self):
        self.amplitudes = np.asarray(self.amplitudes, dtype=np.complex128).reshape(-1)

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))

    @property
    def probabilities(self) -> np.ndarray:
        return np.abs(self.amplitudes) ** 2

    def is_normalized(self, atol: float = 1e-10) -> bool:
        return abs(self.norm ** 2 - 1.0) <= atol


@dataclass
class QramTree:
    """Binary tree of partial sums of squared entries.

    ``levels[0]`` holds the root ``||x||^2`` and ``levels[-1]`` the squared
    leaves, padded with zeros to a power of two. Signs are stored per leaf.
    """

    levels: list[np.ndarray]
    signs: np.ndarray
    size: int

    @property
    def n_qubits(self) -> int:
        return len(self.levels) - 1

    @property
    def n_rotations(self) -> int:
        """Number of controlled rotations in the cascade (one per internal node)."""
        return sum(len(level) for level in self.levels[:-1])

    def node_consistency_error(self) -> float:
        return max(
            float(np.max(np.abs(self.levels[k] - self.levels[k + 1].reshape(-1, 2).sum(axis=1))))
            for k in range(self.n_qubits)
        )


def qram_build(x) -> QramTree:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if not np.any(x):
        raise ValueError("cannot load a zero vector")
    n = max(1, math.ceil(math.log2(len(x))))
    leaves = np.zeros(2 ** n)
    leaves[: len(x)] = x * x
    signs = np.ones(2 ** n)
    signs[: len(x)] = np.where(x < 0, -1.0, 1.0)
    levels = [leaves]
    while len(levels[0]) > 1:
        levels.insert(0, levels[0].reshape(-1, 2).sum(axis=1))
    return QramTree(levels, signs, len(x))


def qram_prepare(tree: QramTree) -> StateVector:
    """Run the rotation cascade from the root down, then load the signs.

    At each internal node with weight ``w`` and children ``(a, b)`` the
    branch amplitude is split by a rotation with ``cos = sqrt(a/w)`` and
    ``sin = sqrt(b/w)``. The returned register has ``2**n_qubits`` entries;
    padding amplitudes are zero.
    """
    amps = np.ones(1, dtype=np.float64)
    for parent, children in zip(tree.levels[:-1], tree.levels[1:]):
        pairs = children.reshape(-1, 2)
        with np.errstate(invalid="ignore", divide="ignore"):
            cos = np.where(parent > 0, np.sqrt(pairs[:, 0] / parent), 1.0)
            sin = np.where(parent > 0, np.sqrt(pairs[:, 1] / parent), 0.0)
        amps = np.column_stack([amps * cos, amps * sin]).reshape(-1)
    return StateVector(amps * tree.signs)


# --------------------------------------------------------------------------
# density operator and phase estimation


@dataclass
class DensityOperator:
    matrix: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.complex128)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("density operator must be a square matrix")
        if not np.allclose(m, m.conj().T, atol=HERMITIAN_ATOL, rtol=0):
            raise ValueError("density operator must be Hermitian")
        self.matrix = m

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def trace(self) -> float:
        return float(np.trace(self.matrix).real)

    @classmethod
    def pure(cls, psi) -> "DensityOperator":
        psi = np.asarray(psi, dtype=np.complex128).reshape(-1)
        psi = psi / np.linalg.norm(psi)
        return cls(np.outer(psi, psi.conj()), normalized=True)


def build_density(x, normalize: bool = True) -> DensityOperator:
    """Density operator of the tensor contracted along its first index.

    The whole tensor is loaded as one amplitude state over ``(i1, i2, i3)``
    and the ``i1`` register is traced out. Without normalization the result
    is rescaled by ``||x||_F**2`` so that it equals the mode-1 Gram matrix.
    """
    x = as_tensor3(x)
    if not np.any(x):
        raise ValueError("cannot build a density operator from a zero tensor")
    d1, d2, d3 = x.shape
    psi = qram_prepare(qram_build(x.reshape(-1))).amplitudes[: x.size].reshape(d1, d2 * d3)
    rho = psi.T @ psi.conj()
    rho = (rho + rho.conj().T) / 2
    if not normalize:
        rho = rho * float(np.sum(x * x))
    return DensityOperator(rho, normalized=normalize)


@dataclass(frozen=True)
class ClockConfig:
    dt: float
    levels: int

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("clock step dt must be positive")
        if self.levels < 2:
            raise ValueError("clock needs at least 2 levels")


@dataclass
class Eigenpair:
    """One eigenvalue with its clock reading.

    ``sigma2`` is the exact eigenvalue, ``clock_index`` the rounded clock
    value of ``2 pi / (sigma2 / scale)`` and ``sigma2_estimate`` its
    inversion back to ``sigma2``. ``bin_width`` is the width in ``sigma2``
    of the clock bin the value fell into.
    """

    sigma2: float
    vector: np.ndarray
    clock_index: int
    sigma2_estimate: float
    bin_width: float
    overflow: bool

    def to_dict(self) -> dict:
        return {
            "sigma2": self.sigma2,
            "clock_index": self.clock_index,
            "sigma2_estimate": self.sigma2_estimate,
            "bin_width": self.bin_width,
            "overflow": self.overflow,
        }


def _clock_reading(sigma2: float, scale: float, clock: ClockConfig):
    if sigma2 <= 0:
        return 0, 0.0, math.inf, True
    c = 2 * math.pi * scale / clock.dt
    k = int(round(c / sigma2))
    if k < 1 or k >= clock.levels:
        return k, math.nan, math.inf, True
    estimate = c / k
    hi = c / (k - 0.5)
    lo = c / (k + 0.5)
    return k, estimate, hi - lo, False


def phase_estimate(rho: DensityOperator, clock: ClockConfig) -> list[Eigenpair]:
    """Eigenpairs of ``rho`` in decreasing order with discretized clock estimates.

    Eigenvalues are rescaled by ``1/dim`` before being put on the clock.
    Zero eigenvalues and readings outside ``[1, levels)`` are flagged as
    overflow.
    """
    vals, vecs = np.linalg.eigh(rho.matrix)
    order = np.argsort(-vals, kind="stable")
    out = []
    for i in order:
        s2 = max(float(vals[i]), 0.0)
        k, est, width, overflow = _clock_reading(s2, rho.dim, clock)
        out.append(Eigenpair(s2, vecs[:, i], k, est, width, overflow))
    return out


def default_clock(rho: DensityOperator, tau: float = 0.0, resolution: int = 100) -> ClockConfig:
    """Clock fine enough that the largest eigenvalue sits ``resolution`` bins up,
    with enough levels for the smallest eigenvalue at or above ``tau**2``.
    """
    vals = np.clip(np.linalg.eigvalsh(rho.matrix), 0.0, None)
    top = float(vals.max())
    if top <= 0:
        return ClockConfig(1.0, 2)
    floor = max(tau * tau, top * 1e-12)
    kept = vals[vals >= floor]
    smallest = float(kept.min()) if len(kept) else top
    c = 2 * math.pi * rho.dim
    dt = c / top / resolution
    levels = int(math.ceil(c / smallest / dt)) + 2
    return ClockConfig(dt, levels)


# --------------------------------------------------------------------------
# singular value projection


@dataclass
class ProjectionResult:
    """Projected state and its success amplitude.

    ``success_probability`` is ``||P psi|| / ||psi||``; its square, the Born
    probability of the projection, is kept alongside. ``state`` is ``None``
    when nothing survives.
    """

    state: StateVector | None
    success_probability: float
    success_probability_squared: float
    kept: list[int] = field(default_factory=list)

    @property
    def empty(self) -> bool:
        return self.state is None


def _clusters(values: np.ndarray) -> list[list[int]]:
    groups: list[list[int]] = []
    for i in np.argsort(-values, kind="stable"):
        if groups and abs(values[groups[-1][-1]] - values[i]) < DEGENERACY_GAP:
            groups[-1].append(int(i))
        else:
            groups.append([int(i)])
    return groups


def svp_project(state: StateVector, eigenpairs: list[Eigenpair], tau: float,
                use_clock: bool = False) -> ProjectionResult:
    """Keep the components of ``state`` along eigenvectors with ``sigma2 >= tau**2``.

    Eigenvalues closer than ``1e-9`` form one block and are kept or
    dropped together, using the block mean. With ``use_clock`` the decision
    uses the clock estimates instead of the exact eigenvalues; overflowed
    readings then count as below threshold.
    """
    psi = state.amplitudes
    in_norm = np.linalg.norm(psi)
    if in_norm == 0:
        raise ValueError("input state is zero")
    exact = np.array([e.sigma2 for e in eigenpairs])
    if use_clock:
        values = np.array([0.0 if e.overflow else e.sigma2_estimate for e in eigenpairs])
    else:
        values = exact
    kept = []
    for block in _clusters(exact):
        if float(np.mean(values[block])) >= tau * tau:
            kept.extend(block)
    kept.sort()
    if not kept:
        return ProjectionResult(None, 0.0, 0.0, [])
    v = np.column_stack([eigenpairs[i].vector for i in kept])
    out = v @ (v.conj().T @ psi)
    amp = float(np.linalg.norm(out)) / in_norm
    if amp == 0:
        return ProjectionResult(None, 0.0, 0.0, kept)
    return ProjectionResult(StateVector(out / np.linalg.norm(out), state.shape), amp, amp * amp, kept)


# --------------------------------------------------------------------------
# full sampler


@dataclass
class SamplingOutcome:
    shots: int
    counts: np.ndarray
    postselected: np.ndarray
    predicate: int
    success_probability: float
    success_probability_squared: float
    distribution: np.ndarray
    eigenpairs: list[Eigenpair]
    notes: list[str] = field(default_factory=list)

    @property
    def predicate_marginal(self) -> np.ndarray:
        return self.distribution.sum(axis=1)

    def to_dict(self) -> dict:
        return {
            "shots": self.shots,
            "predicate": self.predicate,
            "success_probability": self.success_probability,
            "success_probability_squared": self.success_probability_squared,
            "counts": self.counts.tolist(),
            "postselected": self.postselected.tolist(),
            "predicate_marginal": self.predicate_marginal.tolist(),
            "eigenvalues": [e.to_dict() for e in self.eigenpairs],
            "notes": self.notes,
        }


def run_algorithm1(x, s: int, p: int, tau: float, clock: ClockConfig | None = None, shots: int = 1000,
                   seed: int = 0, use_clock: bool = False) -> SamplingOutcome:
    """Sample ``(predicate, object)`` pairs for subject ``s`` and post-select on ``p``.

    The density operator is left unnormalized so that its eigenvalues are
    the squared singular values of the mode-1 flattening and ``tau``
    thresholds them directly.
    """
    x = as_tensor3(x)
    d1, d2, d3 = x.shape
    if not 0 <= s < d1:
        raise IndexError(f"subject {s} out of range")
    if not 0 <= p < d2:
        raise IndexError(f"predicate {p} out of range")
    row = flatten(x, 1)[s]
    if not np.any(row):
        raise ValueError(f"row {s} of the tensor is zero")
    psi = StateVector(qram_prepare(qram_build(row)).amplitudes[: d2 * d3], (d2, d3))
    rho = build_density(x, normalize=False)
    clock = clock or default_clock(rho, tau)
    pairs = phase_estimate(rho, clock)
    proj = svp_project(psi, pairs, tau, use_clock=use_clock)
    notes = []
    if proj.empty:
        dist = np.zeros((d2, d3))
        counts = np.zeros((d2, d3), dtype=np.int64)
        notes.append("projection removed the whole state")
    else:
        dist = proj.state.probabilities.reshape(d2, d3)
        rng = np.random.default_rng(seed)
        counts = rng.multinomial(shots, dist.reshape(-1) / dist.sum()).reshape(d2, d3)
    post = counts[p].copy()
    if post.sum() == 0:
        notes.append(f"no shot landed on predicate {p}")
    return SamplingOutcome(shots, counts, post, p, proj.success_probability, proj.success_probability_squared,
                           dist, pairs, notes)


def oracle_distribution(x, s: int, tau: float) -> np.ndarray:
    """Classical reference: normalized squares of ``V_tau V_tau^T x_s`` as a ``(d2, d3)`` grid.

    ``V_tau`` spans the right singular vectors of the mode-1 flattening with
    singular value at least ``tau``. Returns zeros when nothing survives.
    """
    x = as_tensor3(x)
    m = flatten(x, 1)
    _, sv, vt = np.linalg.svd(m, full_matrices=False)
    v = vt[sv >= tau].T
    proj = v @ (v.T @ m[s])
    total = float(np.sum(proj * proj))
    if total == 0:
        return np.zeros(x.shape[1:])
    return (proj * proj / total).reshape(x.shape[1:])


# --------------------------------------------------------------------------
# density-matrix exponentiation checks


def _check_doubled(dim: int, cap: int) -> None:
    if dim * dim > cap:
        raise ValueError(f"doubled space of dimension {dim * dim} exceeds cap {cap}")


def swap_operator(dim: int) -> np.ndarray:
    s = np.zeros((dim * dim, dim * dim))
    for i in range(dim):
        for j in range(dim):
            s[i * dim + j, j * dim + i] = 1.0
    return s


def partial_trace_first(m: np.ndarray, dim: int) -> np.ndarray:
    return np.einsum("ijik->jk", m.reshape(dim, dim, dim, dim))


def _as_matrix(op) -> np.ndarray:
    return op.matrix if isinstance(op, DensityOperator) else np.asarray(op, dtype=np.complex128)


def trotter_step_check(rho, sigma, dt: float, cap: int = DEFAULT_DOUBLED_CAP) -> float:
    """Frobenius gap between one swap-evolution step and its first-order expansion.

    Compares ``tr_1[exp(-i S dt) (rho x sigma) exp(i S dt)]`` with
    ``sigma - i dt [rho, sigma]``.
    """
    r = _as_matrix(rho)
    g = _as_matrix(sigma)
    if r.shape != g.shape:
        raise ValueError("rho and sigma must have the same dimension")
    dim = r.shape[0]
    _check_doubled(dim, cap)
    u = expm(-1j * dt * swap_operator(dim))
    evolved = partial_trace_first(u @ np.kron(r, g) @ u.conj().T, dim)
    first_order = g - 1j * dt * (r @ g - g @ r)
    return float(np.linalg.norm(evolved - first_order))


def modified_swap(a: np.ndarray) -> np.ndarray:
    """``S_A = sum_jk A_jk |k><j| x |j><k|``."""
    dim = a.shape[0]
    s = np.zeros((dim * dim, dim * dim), dtype=np.complex128)
    for j in range(dim):
        for k in range(dim):
            s[k * dim + j, j * dim + k] = a[j, k]
    return s


def simulate_exponentiation(a_matrix, t: float, n_steps: int, sigma, cap: int = DEFAULT_DOUBLED_CAP) -> DensityOperator:
    """Approximate ``exp(-i A t / N) sigma exp(i A t / N)`` with ``N = dim``.

    Each of ``n_steps`` steps couples ``sigma`` to a fresh uniform
    superposition state through ``exp(-i S_A t / n_steps)`` and traces the
    auxiliary register out.
    """
    a = np.asarray(a_matrix, dtype=np.complex128)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or not np.allclose(a, a.conj().T, atol=HERMITIAN_ATOL, rtol=0):
        raise ValueError("a_matrix must be Hermitian")
    g = _as_matrix(sigma)
    dim = a.shape[0]
    if g.shape != a.shape:
        raise ValueError("sigma and a_matrix dimensions differ")
    _check_doubled(dim, cap)
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    mu = np.full((dim, dim), 1.0 / dim, dtype=np.complex128)
    u = expm(-1j * (t / n_steps) * modified_swap(a))
    ud = u.conj().T
    for _ in range(n_steps):
        g = partial_trace_first(u @ np.kron(mu, g) @ ud, dim)
    g = (g + g.conj().T) / 2
    return DensityOperator(g, normalized=isinstance(sigma, DensityOperator) and sigma.normalized)


def exact_exponentiation(a_matrix, t: float, sigma) -> np.ndarray:
    a = np.asarray(a_matrix, dtype=np.complex128)
    u = expm(-1j * t * a / a.shape[0])
    return u @ _as_matrix(sigma) @ u.conj().T

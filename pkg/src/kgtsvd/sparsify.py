"""Subsampling of binary tensors and the sample-probability bounds.

All logarithms are natural. Probabilities above 1 are reported as they
are and flagged infeasible rather than clipped.
"""

from __future__ import annotations

import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .tensor_core import as_tensor3, frobenius_norm, spectral_norm_estimate
from .tsvd import TruncationSpec, greedy_tsvd, reconstruct, truncate_or_project

N_MODES = 3
N0 = math.log(1.5)
P_FLOOR = 0.22


@dataclass(frozen=True)
class SparsifyConfig:
    p: float
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.p <= 1:
            raise ValueError(f"sample probability must lie in (0, 1], got {self.p}")


def subsample(a, cfg: SparsifyConfig) -> np.ndarray:
    """Keep each nonzero entry with probability ``p`` and rescale it by ``1/p``."""
    dense = a.to_dense() if hasattr(a, "to_dense") else as_tensor3(a)
    rng = np.random.default_rng(cfg.seed)
    out = np.zeros_like(dense)
    nz = np.flatnonzero(dense)
    keep = nz[rng.random(len(nz)) < cfg.p]
    out.flat[keep] = dense.flat[keep] / cfg.p
    return out


@dataclass
class NoiseStats:
    frobenius: float
    spectral_estimate: float
    frobenius_truncated: float
    spectral_estimate_truncated: float
    entry_mean: float
    entry_variance: float
    target_variance: float
    spectral_label: str = "estimate (lower bound)"


def noise_stats(a, a_hat, p: float, r: int) -> NoiseStats:
    """Norms and entry moments of the noise ``a_hat - a`` and its rank-``r`` truncation."""
    a = as_tensor3(a)
    noise = as_tensor3(a_hat) - a
    if np.any(noise):
        nr = reconstruct(greedy_tsvd(noise, r))
    else:
        nr = np.zeros_like(noise)
    support = a != 0
    vals = noise[support] if support.any() else noise.reshape(-1)
    target = float(np.mean(a[support] ** 2) * (1 / p - 1)) if support.any() else 0.0
    return NoiseStats(
        frobenius=frobenius_norm(noise),
        spectral_estimate=spectral_norm_estimate(noise),
        frobenius_truncated=frobenius_norm(nr),
        spectral_estimate_truncated=spectral_norm_estimate(nr),
        entry_mean=float(vals.mean()),
        entry_variance=float(vals.var()),
        target_variance=target,
    )


# --------------------------------------------------------------------------
# constants and bounds


def _check_delta(delta: float) -> None:
    if not 0 < delta < 1:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")


def c0_constant(dims, delta: float) -> float:
    """``8 (ln(2N/N0) * sum(d_k) + ln(2/delta))`` with ``N = 3`` and ``N0 = ln 1.5``."""
    _check_delta(delta)
    return 8.0 * (math.log(2 * N_MODES / N0) * sum(dims) + math.log(2.0 / delta))


def _check_norm(frob_norm_a: float) -> None:
    if not frob_norm_a > 0:
        raise ValueError("the tensor norm must be positive")


@dataclass(frozen=True)
class ProbabilityBound:
    value: float
    branch: float
    floor_active: bool

    @property
    def feasible(self) -> bool:
        return self.value <= 1.0


def required_probability_thm1(r: int, dims, delta: float, eps_tilde: float, frob_norm_a: float) -> ProbabilityBound:
    """Minimal sample probability for truncated-rank reconstruction."""
    _check_norm(frob_norm_a)
    branch = r * c0_constant(dims, delta) / (eps_tilde * frob_norm_a) ** 2
    return ProbabilityBound(max(P_FLOOR, branch), branch, branch <= P_FLOOR)


@dataclass(frozen=True)
class Thm2Probabilities:
    p1: float | None
    p2: float
    p3: float
    p_min: float
    tau_max: float

    @property
    def feasible(self) -> bool:
        return self.p_min <= 1.0


def required_probability_thm2(r: int, dims, delta: float, eps_tilde: float, eps1: float, frob_norm_a: float,
                              l1: int | None = None) -> Thm2Probabilities:
    """Branch probabilities for thresholded reconstruction and the largest admissible threshold.

    ``p1`` needs the number of singular values of the subsampled tensor
    above the threshold, which is only known after decomposing it; pass
    ``l1=None`` to omit that branch.
    """
    _check_norm(frob_norm_a)
    c0 = c0_constant(dims, delta)
    scale = (eps_tilde * frob_norm_a) ** 2
    p1 = l1 * c0 / scale if l1 is not None else None
    p2 = r * c0 / scale
    p3 = math.sqrt(2 * r * c0) / (eps1 * eps_tilde * frob_norm_a) if math.isfinite(eps1) else 0.0
    p_min = max([P_FLOOR, p2, p3] + ([p1] if p1 is not None else []))
    tau_max = math.sqrt(2 * c0) / (p_min * eps_tilde)
    return Thm2Probabilities(p1, p2, p3, p_min, tau_max)


def eps_total_thm1(eps0: float, eps_tilde: float) -> float:
    return 2 * (eps0 + math.sqrt(eps0) + math.sqrt(eps_tilde)) + eps_tilde


def eps_total_thm2(eps0: float, eps_tilde: float, eps1: float) -> float:
    return 3 * (2 * eps0 + 2 * math.sqrt(eps0) + 2 * math.sqrt(eps_tilde) + eps_tilde + eps1)


def _check_p(p: float) -> None:
    if not 0 < p <= 1:
        raise ValueError(f"p must lie in (0, 1], got {p}")
    if p < P_FLOOR:
        warnings.warn(f"p={p} is below {P_FLOOR}; the noise bound is unproven there", RuntimeWarning, stacklevel=3)


def noise_spectral_bound(dims, p: float, delta: float) -> float:
    """High-probability bound on the spectral norm of the subsampling noise."""
    _check_p(p)
    return math.sqrt(c0_constant(dims, delta) / p)


def noise_frobenius_bound(r: int, dims, p: float, delta: float) -> float:
    """Bound on the Frobenius norm of the rank-``r`` truncated noise (``sqrt(r)`` times the spectral bound)."""
    return math.sqrt(r) * noise_spectral_bound(dims, p, delta)


@dataclass
class BoundReport:
    dims: tuple[int, int, int]
    delta: float
    r: int
    eps_tilde: float
    eps0: float
    eps1: float
    frob_norm_a: float
    c0: float
    n0: float
    p_min_thm1: float
    p1: float | None
    p2: float
    p3: float
    p_min_thm2: float
    tau_max: float
    eps_total_thm1: float
    eps_total_thm2: float
    l1: int | None = None
    infeasible: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def bound_report(dims, delta: float, r: int, eps_tilde: float, eps0: float, eps1: float, frob_norm_a: float,
                 l1: int | None = None) -> BoundReport:
    t1 = required_probability_thm1(r, dims, delta, eps_tilde, frob_norm_a)
    t2 = required_probability_thm2(r, dims, delta, eps_tilde, eps1, frob_norm_a, l1)
    infeasible = [name for name, v in (("p_min_thm1", t1.value), ("p_min_thm2", t2.p_min)) if v > 1]
    return BoundReport(
        dims=tuple(int(d) for d in dims), delta=delta, r=r, eps_tilde=eps_tilde, eps0=eps0, eps1=eps1,
        frob_norm_a=frob_norm_a, c0=c0_constant(dims, delta), n0=N0, p_min_thm1=t1.value,
        p1=t2.p1, p2=t2.p2, p3=t2.p3, p_min_thm2=t2.p_min, tau_max=t2.tau_max,
        eps_total_thm1=eps_total_thm1(eps0, eps_tilde), eps_total_thm2=eps_total_thm2(eps0, eps_tilde, eps1),
        l1=l1, infeasible=infeasible,
    )


# --------------------------------------------------------------------------
# sub-Gaussian comparison functions


def f1(x, p):
    """``p x + ln(1 - p + p e^{-x})``."""
    x = np.asarray(x, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    return p * x + np.log1p(p * np.expm1(-x))


def f2(x, p):
    """``p x^2 / 2``."""
    x = np.asarray(x, dtype=np.float64)
    return np.asarray(p, dtype=np.float64) * x * x / 2


def subgaussian_min_p(x_grid, resolution: float = 1e-4) -> np.ndarray:
    """Smallest ``p`` in ``(0, 1]`` with ``f1(x, p) <= f2(x, p)`` for each ``x``.

    Bisection on ``p``, vectorized over the grid, until the bracket is
    narrower than ``resolution``; the upper end of the bracket is returned.
    For ``x >= 0`` the inequality holds for every ``p`` and 0 is returned.
    Returns an ``(n, 2)`` array of ``(x, p_min)`` rows.
    """
    x = np.asarray(x_grid, dtype=np.float64).reshape(-1)
    lo = np.zeros_like(x)
    hi = np.ones_like(x)
    neg = x < 0
    while np.any(hi[neg] - lo[neg] > resolution):
        mid = (lo + hi) / 2
        ok = f1(x, mid) <= f2(x, mid)
        hi = np.where(neg & ok, mid, hi)
        lo = np.where(neg & ~ok, mid, lo)
    pmin = np.where(neg, hi, 0.0)
    return np.column_stack([x, pmin])


DEFAULT_TABLE_X = (0.0, -0.1, -0.2, -0.3, -0.4, -0.5, -0.6, -0.7, -0.8, -0.9, -1, -2, -3, -4, -5, -6, -7, -8,
                 -10, -20)


def format_min_p_table(rows, columns: int = 4) -> str:
    """Aligned text table of ``(x, p_min)`` pairs, column-major like the appendix layout."""
    rows = [(float(x), float(p)) for x, p in rows]
    height = math.ceil(len(rows) / columns)
    lines = []
    for i in range(height):
        cells = []
        for j in range(columns):
            k = j * height + i
            if k < len(rows):
                x, p = rows[k]
                cells.append(f"x={x:<6g} | p >= {p:.4f}")
        lines.append(" || ".join(cells))
    return "\n".join(lines)


# --------------------------------------------------------------------------
# empirical checks


def _map_trials(fn, trials: int, workers: int) -> list:
    if workers <= 1:
        return [fn(i) for i in range(trials)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(trials)))


@dataclass
class ReconstructionReport:
    p: float
    spec: dict
    trials: int
    errors: list[float]
    quantiles: dict[str, float]
    eps_bound: float | None
    within_bound: bool | None
    in_theory_regime: bool
    notes: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def verify_reconstruction(a, cfg: SparsifyConfig, spec: TruncationSpec, trials: int = 100, *,
                          decomposition_rank: int | None = None, eps_bound: float | None = None,
                          workers: int = 1) -> ReconstructionReport:
    """Subsample, decompose, truncate and measure ``||A - A_hat_spec||_F / ||A||_F``.

    Trial ``i`` uses seed ``cfg.seed + i``. The subsampled tensor is
    decomposed greedily at ``decomposition_rank`` (defaults to the
    truncation rank, or ``min(dims)`` for a threshold spec) and then cut
    down with ``spec``. ``eps_bound`` is compared against the largest error.
    Trials are independent, so ``workers > 1`` runs them on a thread pool
    without changing the result.
    """
    a = as_tensor3(a)
    if not np.all((a == 0) | (a == 1)):
        raise ValueError("verify_reconstruction expects a binary tensor")
    norm_a = frobenius_norm(a)
    if decomposition_rank is None:
        decomposition_rank = spec.rank if spec.rank is not None else min(a.shape)

    def trial(i):
        a_hat = subsample(a, SparsifyConfig(cfg.p, cfg.seed + i))
        if not np.any(a_hat):
            return 1.0
        model = truncate_or_project(greedy_tsvd(a_hat, decomposition_rank), spec)
        return frobenius_norm(a - reconstruct(model)) / norm_a

    errors = _map_trials(trial, trials, workers)
    err = np.array(errors)
    notes = []
    in_regime = cfg.p >= P_FLOOR
    if not in_regime:
        notes.append(f"p={cfg.p} is below {P_FLOOR}: outside the regime covered by the bounds")
    quant = {q: float(np.quantile(err, float(q))) for q in ("0.0", "0.5", "0.9", "1.0")}
    within = None if eps_bound is None else bool(err.max() <= eps_bound)
    return ReconstructionReport(cfg.p, {"rank": spec.rank, "threshold": spec.threshold}, trials, errors, quant,
                                eps_bound, within, in_regime, notes)


@dataclass
class NoiseBoundCheck:
    trials: int
    below: int
    bound: float
    estimates: list[float]

    @property
    def fraction_below(self) -> float:
        return self.below / self.trials


def check_noise_spectral_bound(a, p: float, delta: float, trials: int = 200, seed: int = 0,
                               workers: int = 1) -> NoiseBoundCheck:
    """Count how often the estimated spectral norm of the noise stays below the bound."""
    a = as_tensor3(a)
    bound = noise_spectral_bound(a.shape, p, delta)

    def trial(i):
        a_hat = subsample(a, SparsifyConfig(p, seed + i))
        return spectral_norm_estimate(a_hat - a, restarts=4, seed=seed + i)

    est = _map_trials(trial, trials, workers)
    below = int(np.sum(np.array(est) <= bound))
    return NoiseBoundCheck(trials, below, bound, est)

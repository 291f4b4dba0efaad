"""Orthogonal tensor SVD: greedy rank-1 deflation and SGD training.

A model is ``sum_i sigma_i u1_i (x) u2_i (x) u3_i`` with unit-norm,
mutually orthogonal columns in each factor matrix. The greedy solver
enforces orthogonality exactly through projection inside every power
iteration. The trainer minimizes squared error on observed and corrupted
triples plus a penalty ``gamma * sum_k ||U_k^T U_k - I||_F``.
"""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .tensor_core import DEFAULT_DENSIFY_CAP, ProjectionOperator, as_tensor3, check_densify, flatten, mode_product

logger = logging.getLogger(__name__)


@dataclass
class TensorSVDModel:
    """Signed singular values with one factor matrix per mode (columns = terms)."""

    sigma: np.ndarray
    U1: np.ndarray
    U2: np.ndarray
    U3: np.ndarray

    def __post_init__(self):
        self.sigma = np.asarray(self.sigma, dtype=np.float64).reshape(-1)
        r = len(self.sigma)
        for name in ("U1", "U2", "U3"):
            u = np.asarray(getattr(self, name), dtype=np.float64)
            if u.ndim != 2 or u.shape[1] != r:
                raise ValueError(f"{name} must have {r} columns, got shape {u.shape}")
            setattr(self, name, u)

    @classmethod
    def empty(cls, dims) -> "TensorSVDModel":
        return cls(np.zeros(0), *(np.zeros((d, 0)) for d in dims))

    @property
    def rank(self) -> int:
        return len(self.sigma)

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.U1.shape[0], self.U2.shape[0], self.U3.shape[0])

    @property
    def factors(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return (self.U1, self.U2, self.U3)

    def sorted(self) -> "TensorSVDModel":
        """Copy with terms ordered by decreasing ``|sigma|``."""
        order = np.argsort(-np.abs(self.sigma), kind="stable")
        return TensorSVDModel(self.sigma[order], self.U1[:, order], self.U2[:, order], self.U3[:, order])

    def orthogonality_error(self) -> float:
        """Largest deviation of any factor Gram matrix from the identity."""
        if self.rank == 0:
            return 0.0
        eye = np.eye(self.rank)
        return max(float(np.abs(u.T @ u - eye).max()) for u in self.factors)

    def score_objects(self, s: int, p: int) -> np.ndarray:
        return self.U3 @ (self.sigma * self.U1[s] * self.U2[p])

    def score_pairs(self, s: int) -> np.ndarray:
        """Scores of every ``(p, o)`` pair for subject ``s``, shape ``(d2, d3)``."""
        return (self.U2 * (self.sigma * self.U1[s])) @ self.U3.T


@dataclass(frozen=True)
class TruncationSpec:
    """Keep the top ``rank`` terms by ``|sigma|``, or every term with ``|sigma| >= threshold``."""

    rank: int | None = None
    threshold: float | None = None

    def __post_init__(self):
        if (self.rank is None) == (self.threshold is None):
            raise ValueError("set exactly one of rank or threshold")
        if self.rank is not None and self.rank < 0:
            raise ValueError("rank must be non-negative")
        if self.threshold is not None and not self.threshold > 0:
            raise ValueError("threshold must be positive")


@dataclass
class RankOneResult:
    sigma: float
    u1: np.ndarray
    u2: np.ndarray
    u3: np.ndarray
    converged: bool
    n_iter: int


def score(model: TensorSVDModel, s: int, p: int, o: int) -> float:
    for idx, d, name in zip((s, p, o), model.dims, ("s", "p", "o")):
        if not 0 <= idx < d:
            raise IndexError(f"{name}={idx} out of range [0, {d})")
    return float(np.sum(model.sigma * model.U1[s] * model.U2[p] * model.U3[o]))


def reconstruct(model: TensorSVDModel, cap: int = DEFAULT_DENSIFY_CAP) -> np.ndarray:
    check_densify(model.dims, cap)
    return np.einsum("r,ir,jr,kr->ijk", model.sigma, model.U1, model.U2, model.U3)


def truncate_or_project(model: TensorSVDModel, spec: TruncationSpec) -> TensorSVDModel:
    """Keep a subset of terms; signed sigma is preserved.

    The threshold variant compares ``|sigma|`` so large negative singular
    values survive the cut.
    """
    order = np.argsort(-np.abs(model.sigma), kind="stable")
    if spec.rank is not None:
        keep = order[: spec.rank]
    else:
        keep = order[np.abs(model.sigma[order]) >= spec.threshold]
    return TensorSVDModel(model.sigma[keep], model.U1[:, keep], model.U2[:, keep], model.U3[:, keep])


def _complement_projector(prior: np.ndarray | None, d: int) -> np.ndarray:
    if prior is None or prior.shape[1] == 0:
        return np.eye(d)
    return np.eye(d) - prior @ prior.T


def _complement_unit_vector(q: np.ndarray) -> np.ndarray:
    # column of the complement projector with the largest norm, normalized
    norms = np.linalg.norm(q, axis=0)
    j = int(np.argmax(norms))
    if norms[j] < 1e-12:
        raise ValueError("no orthogonal complement left in this mode")
    return q[:, j] / norms[j]


def _rank_one(a, ortho_against, tol, max_iter, allow_zero):
    dims = a.shape
    priors = ortho_against if ortho_against is not None else (None, None, None)
    qs = [_complement_projector(priors[k], dims[k]) for k in range(3)]
    ap = a
    for k in range(3):
        ap = mode_product(ap, qs[k], k + 1)
    scale = np.linalg.norm(a)
    if np.linalg.norm(ap) <= 1e-14 * max(scale, 1e-300):
        if not allow_zero:
            raise ValueError("tensor is zero on the orthogonal complement of the prior factors")
        us = [_complement_unit_vector(q) for q in qs]
        return RankOneResult(0.0, *us, converged=True, n_iter=0)

    us = []
    for k in range(3):
        u = np.linalg.svd(flatten(ap, k + 1), full_matrices=False)[0][:, 0]
        us.append(u)
    u1, u2, u3 = us
    sigma = float(np.einsum("ijk,i,j,k->", a, u1, u2, u3))
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        prev = sigma
        u1 = _normalized(qs[0] @ np.einsum("ijk,j,k->i", a, u2, u3), u1)
        u2 = _normalized(qs[1] @ np.einsum("ijk,i,k->j", a, u1, u3), u2)
        u3 = _normalized(qs[2] @ np.einsum("ijk,i,j->k", a, u1, u2), u3)
        sigma = float(np.einsum("ijk,i,j,k->", a, u1, u2, u3))
        if abs(sigma - prev) <= tol * max(abs(sigma), 1e-300):
            converged = True
            break
    return RankOneResult(sigma, u1, u2, u3, converged=converged, n_iter=it)


def _normalized(v: np.ndarray, fallback: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > 0 else fallback


def best_rank_one(a, ortho_against=None, tol: float = 1e-8, max_iter: int = 500) -> RankOneResult:
    """Best rank-1 term of ``a`` by alternating power updates.

    ``ortho_against`` is an optional triple of prior factor matrices; every
    update of ``u_k`` is projected onto the orthogonal complement of the
    prior columns of mode ``k``. Starts from the leading left singular
    vectors of the projected flattenings. If ``max_iter`` is hit the best
    iterate is returned with ``converged=False``.
    """
    a = as_tensor3(a)
    if not np.any(a):
        raise ValueError("best_rank_one needs a nonzero tensor")
    return _rank_one(a, ortho_against, tol, max_iter, allow_zero=False)


def greedy_tsvd(a, r: int, tol: float = 1e-8, max_iter: int = 500) -> TensorSVDModel:
    """Rank-``r`` orthogonal decomposition by successive deflation.

    Singular values are made non-negative by absorbing signs into ``U1``
    and sorted by magnitude.
    """
    a = as_tensor3(a)
    if r < 0 or r > min(a.shape):
        raise ValueError(f"rank {r} must lie in [0, {min(a.shape)}]")
    if r == 0:
        return TensorSVDModel.empty(a.shape)
    if not np.any(a):
        raise ValueError("greedy_tsvd needs a nonzero tensor")
    sig: list[float] = []
    cols: list[list[np.ndarray]] = [[], [], []]
    residual = a.copy()
    for _ in range(r):
        prior = tuple(np.column_stack(c) if c else None for c in cols)
        res = _rank_one(residual, prior, tol, max_iter, allow_zero=True)
        if not res.converged:
            warnings.warn("greedy_tsvd: rank-1 step did not converge", RuntimeWarning, stacklevel=2)
        s, u1 = res.sigma, res.u1
        if s < 0:
            s, u1 = -s, -u1
        residual = residual - s * np.einsum("i,j,k->ijk", u1, res.u2, res.u3)
        sig.append(s)
        for lst, u in zip(cols, (u1, res.u2, res.u3)):
            lst.append(u)
    sigma = np.array(sig)
    order = np.argsort(-np.abs(sigma), kind="stable")
    mats = [np.column_stack(c)[:, order] for c in cols]
    return TensorSVDModel(sigma[order], *mats)


def projection_operator(model: TensorSVDModel) -> ProjectionOperator:
    return ProjectionOperator(model.factors)


# --------------------------------------------------------------------------
# SGD training


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    rank: int = 64
    learning_rate: float = 0.05
    epochs: int = 100
    batch_size: int = 256
    gamma: float = 0.01
    p: float = 0.9
    neg_ratio: int = 1
    seed: int = 0
    momentum: float = 0.0
    init_std: float = 1.0
    ortho_tol: float = 1e-3

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if not self.p > 0:
            raise ValueError("p must be > 0")
        if self.epochs < 0 or self.batch_size < 1 or self.neg_ratio < 0:
            raise ValueError("epochs, batch_size and neg_ratio must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    penalty: float
    seconds: float


@dataclass
class TrainingLog:
    records: list[EpochRecord] = field(default_factory=list)

    def append(self, rec: EpochRecord) -> None:
        self.records.append(rec)

    def to_jsonl(self) -> str:
        import json

        return "".join(json.dumps(asdict(r)) + "\n" for r in self.records)


def orthonormality_penalty(factors) -> float:
    """``sum_k ||U_k^T U_k - I||_F`` (unsquared, as in the training objective)."""
    total = 0.0
    for u in factors:
        m = u.T @ u - np.eye(u.shape[1])
        total += float(np.linalg.norm(m))
    return total


def _penalty_grad(u: np.ndarray) -> np.ndarray:
    m = u.T @ u - np.eye(u.shape[1])
    n = np.linalg.norm(m)
    if n < 1e-300:
        return np.zeros_like(u)
    return 2.0 * (u @ m) / n


def tsvd_loss_and_grad(params: dict, batch: np.ndarray, targets: np.ndarray, gamma: float):
    """Objective value and gradients on one minibatch.

    ``params`` holds ``sigma``, ``U1``, ``U2``, ``U3``; ``batch`` is an
    ``(n, 3)`` id array and ``targets`` the matching labels.
    """
    sigma, u1, u2, u3 = params["sigma"], params["U1"], params["U2"], params["U3"]
    s, p, o = batch[:, 0], batch[:, 1], batch[:, 2]
    a, b, c = u1[s], u2[p], u3[o]
    eta = (a * b * c) @ sigma
    resid = eta - targets
    n = len(targets)
    mse = float(resid @ resid) / n
    g = 2.0 * resid / n
    grads = {
        "sigma": (a * b * c).T @ g,
        "U1": np.zeros_like(u1),
        "U2": np.zeros_like(u2),
        "U3": np.zeros_like(u3),
    }
    gs = g[:, None] * sigma[None, :]
    np.add.at(grads["U1"], s, gs * b * c)
    np.add.at(grads["U2"], p, gs * a * c)
    np.add.at(grads["U3"], o, gs * a * b)
    pen = 0.0
    if gamma:
        for name in ("U1", "U2", "U3"):
            grads[name] += gamma * _penalty_grad(params[name])
        pen = orthonormality_penalty((u1, u2, u3))
    return mse + gamma * pen, grads


def corrupt(positives: np.ndarray, n_entities: int, ratio: int, rng: np.random.Generator) -> np.ndarray:
    """Replace the subject or the object of each positive by a uniform entity."""
    if ratio == 0 or len(positives) == 0:
        return np.zeros((0, 3), dtype=np.int64)
    neg = np.repeat(positives, ratio, axis=0)
    which = rng.integers(0, 2, size=len(neg))
    repl = rng.integers(0, n_entities, size=len(neg))
    rows = np.arange(len(neg))
    neg[rows[which == 0], 0] = repl[which == 0]
    neg[rows[which == 1], 2] = repl[which == 1]
    return neg


def sgd_train(params, loss_and_grad, positives, n_entities, *, positive_target, config,
              penalty_fn=None, callback=None):
    """Generic minibatch SGD with momentum over positives plus corruptions.

    Each epoch draws fresh negatives (target 0), shuffles positives and
    negatives together and takes one step per batch.
    """
    rng = np.random.default_rng(config.seed)
    log = TrainingLog()
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    penalty_fn = penalty_fn or (lambda prm: 0.0)

    neg0 = corrupt(positives, n_entities, config.neg_ratio, np.random.default_rng(config.seed + 1))
    data0 = np.concatenate([positives, neg0])
    y0 = np.concatenate([np.full(len(positives), positive_target), np.zeros(len(neg0))])
    init_loss, _ = loss_and_grad(params, data0, y0, 0.0)
    log.append(EpochRecord(0, init_loss, penalty_fn(params), 0.0))

    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        neg = corrupt(positives, n_entities, config.neg_ratio, rng)
        data = np.concatenate([positives, neg])
        y = np.concatenate([np.full(len(positives), positive_target), np.zeros(len(neg))])
        perm = rng.permutation(len(data))
        total, count = 0.0, 0
        for start in range(0, len(data), config.batch_size):
            idx = perm[start:start + config.batch_size]
            loss, grads = loss_and_grad(params, data[idx], y[idx], config.gamma)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch starting {start}; "
                    f"max |param| = {max(float(np.abs(v).max()) for v in params.values()):.3g}; "
                    f"last epoch loss = {log.records[-1].loss:.6g}"
                )
            for k, gk in grads.items():
                velocity[k] = config.momentum * velocity[k] - config.learning_rate * gk
                params[k] += velocity[k]
            total += loss * len(idx)
            count += len(idx)
        rec = EpochRecord(epoch, total / max(count, 1), penalty_fn(params), time.perf_counter() - t0)
        log.append(rec)
        logger.debug("epoch %d loss %.6g penalty %.6g", rec.epoch, rec.loss, rec.penalty)
        if callback is not None:
            callback(rec, params)
    return params, log


def init_tsvd_params(dims, config: TrainConfig) -> dict:
    rng = np.random.default_rng(config.seed)
    r = config.rank
    if r > min(dims):
        warnings.warn(f"rank {r} exceeds min(dims)={min(dims)}; factors cannot be orthonormal",
                      RuntimeWarning, stacklevel=3)
    return {
        "sigma": np.ones(r),
        "U1": rng.normal(0.0, config.init_std, (dims[0], r)),
        "U2": rng.normal(0.0, config.init_std, (dims[1], r)),
        "U3": rng.normal(0.0, config.init_std, (dims[2], r)),
    }


def train_tsvd(train, dims, config: TrainConfig, callback=None):
    """Fit a tensor SVD model to training triples.

    ``train`` is a :class:`~kgtsvd.kg_data.TripleSet` or an ``(n, 3)`` id
    array. Positives get target ``1 / config.p``; corrupted triples get 0.
    Returns ``(model, log)``.
    """
    positives = np.asarray(getattr(train, "triples", train), dtype=np.int64).reshape(-1, 3)
    if len(positives) == 0:
        raise ValueError("training split is empty")
    params = init_tsvd_params(dims, config)
    params, log = sgd_train(
        params,
        tsvd_loss_and_grad,
        positives,
        dims[0],
        positive_target=1.0 / config.p,
        config=config,
        penalty_fn=lambda prm: orthonormality_penalty((prm["U1"], prm["U2"], prm["U3"])),
        callback=callback,
    )
    model = TensorSVDModel(params["sigma"], params["U1"], params["U2"], params["U3"]).sorted()
    err = model.orthogonality_error()
    if err > config.ortho_tol:
        logger.warning("factor Gram matrices deviate from identity by %.3g (ortho_tol %.3g)", err, config.ortho_tol)
    return model, log

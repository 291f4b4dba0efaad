"""DistMult baseline trained with mean squared error."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .tsvd import TrainConfig, sgd_train


@dataclass
class DistMultModel:
    """Shared entity table ``E`` (subjects and objects) and predicate table ``P``."""

    entities: np.ndarray
    predicates: np.ndarray

    def __post_init__(self):
        self.entities = np.asarray(self.entities, dtype=np.float64)
        self.predicates = np.asarray(self.predicates, dtype=np.float64)
        if self.entities.shape[1] != self.predicates.shape[1]:
            raise ValueError("entity and predicate embeddings need the same rank")
        if not (np.all(np.isfinite(self.entities)) and np.all(np.isfinite(self.predicates))):
            raise ValueError("embeddings contain non-finite values")

    @property
    def rank(self) -> int:
        return self.entities.shape[1]

    @property
    def dims(self) -> tuple[int, int, int]:
        n_e = self.entities.shape[0]
        return (n_e, self.predicates.shape[0], n_e)

    def score_objects(self, s: int, p: int) -> np.ndarray:
        return self.entities @ (self.entities[s] * self.predicates[p])

    def score_pairs(self, s: int) -> np.ndarray:
        return (self.predicates * self.entities[s]) @ self.entities.T


def distmult_score(model: DistMultModel, s: int, p: int, o: int) -> float:
    n_e, n_p, _ = model.dims
    if not (0 <= s < n_e and 0 <= p < n_p and 0 <= o < n_e):
        raise IndexError(f"triple ({s}, {p}, {o}) out of range for dims {model.dims}")
    # e_s * e_o first so swapping s and o is bit-identical
    return float(np.sum(model.entities[s] * model.entities[o] * model.predicates[p]))


def distmult_loss_and_grad(params: dict, batch: np.ndarray, targets: np.ndarray, gamma: float = 0.0):
    """Mean squared error and its gradients; ``gamma`` is accepted and ignored."""
    e, r = params["E"], params["P"]
    s, p, o = batch[:, 0], batch[:, 1], batch[:, 2]
    a, b, c = e[s], r[p], e[o]
    resid = np.sum(a * b * c, axis=1) - targets
    n = len(targets)
    g = (2.0 * resid / n)[:, None]
    ge = np.zeros_like(e)
    gp = np.zeros_like(r)
    np.add.at(ge, s, g * b * c)
    np.add.at(ge, o, g * a * b)
    np.add.at(gp, p, g * a * c)
    return float(resid @ resid) / n, {"E": ge, "P": gp}


def init_distmult_params(n_entities: int, n_predicates: int, config: TrainConfig) -> dict:
    rng = np.random.default_rng(config.seed)
    return {
        "E": rng.normal(0.0, config.init_std, (n_entities, config.rank)),
        "P": rng.normal(0.0, config.init_std, (n_predicates, config.rank)),
    }


def train_distmult(train, dims, config: TrainConfig, callback=None):
    """Train on positives with target 1 and uniform corruptions with target 0.

    Returns ``(model, log)``. The orthonormality weight in ``config`` is
    ignored.
    """
    positives = np.asarray(getattr(train, "triples", train), dtype=np.int64).reshape(-1, 3)
    n_e, n_p, _ = dims
    params = init_distmult_params(n_e, n_p, config)
    params, log = sgd_train(params, distmult_loss_and_grad, positives, n_e, positive_target=1.0,
                            config=replace(config, gamma=0.0), callback=callback)
    return DistMultModel(params["E"], params["P"]), log

"""Filtered link-prediction metrics and the top-n retrieval bound.

Scorers are any object with ``score_objects(s, p)`` returning one score per
entity and ``score_pairs(s)`` returning a ``(n_predicates, n_entities)``
array. Ties are broken by the mean rank of the tied block. Hits@n values
are stored as fractions; :func:`format_table` prints them as percentages.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field

import numpy as np

DEFAULT_HITS = (1, 3, 10)


def filtered_rank(scores, gold: int, filtered=()) -> float:
    """Rank of ``scores[gold]`` after dropping the candidates in ``filtered``.

    Higher scores rank first. Candidates tied with the gold get the mean
    rank of the tied block, so ``m`` fully tied candidates give ``(m+1)/2``.
    ``gold`` itself is never removed.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if not 0 <= gold < len(scores):
        raise IndexError(f"gold candidate {gold} is not in the candidate set")
    keep = np.ones(len(scores), dtype=bool)
    drop = np.fromiter((c for c in filtered if c != gold), dtype=np.int64)
    keep[drop] = False
    g = scores[gold]
    cand = scores[keep]
    higher = np.count_nonzero(cand > g)
    ties = np.count_nonzero(cand == g) - 1
    return 1.0 + higher + ties / 2.0


@dataclass
class MetricsReport:
    mr: float
    mrr: float
    hits: dict[int, float]
    n_queries: int
    raw_mr: float | None = None
    raw_mrr: float | None = None
    raw_hits: dict[int, float] = field(default_factory=dict)
    task: str = "object"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hits"] = {str(k): v for k, v in self.hits.items()}
        d["raw_hits"] = {str(k): v for k, v in self.raw_hits.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def aggregate(ranks, hits_levels=DEFAULT_HITS) -> tuple[float, float, dict[int, float]]:
    ranks = np.sort(np.asarray(ranks, dtype=np.float64))
    if len(ranks) == 0:
        raise ValueError("no queries to aggregate")
    hits = {int(n): float(np.mean(ranks <= n)) for n in sorted(hits_levels)}
    return float(ranks.mean()), float(np.mean(1.0 / ranks)), hits


def _report(filt, raw, hits_levels, task) -> MetricsReport:
    mr, mrr, hits = aggregate(filt, hits_levels)
    rmr, rmrr, rhits = aggregate(raw, hits_levels)
    return MetricsReport(mr, mrr, hits, len(filt), rmr, rmrr, rhits, task)


def _triples(split) -> np.ndarray:
    return np.asarray(getattr(split, "triples", split), dtype=np.int64).reshape(-1, 3)


def object_ranks(scorer, test, known_true) -> tuple[np.ndarray, np.ndarray]:
    """Filtered and raw ranks of the gold object for every ``(s, p, ?)`` query."""
    by_sp = defaultdict(list)
    for s, p, o in known_true:
        by_sp[(s, p)].append(o)
    filt, raw = [], []
    for s, p, o in _triples(test):
        scores = scorer.score_objects(int(s), int(p))
        filt.append(filtered_rank(scores, int(o), by_sp[(int(s), int(p))]))
        raw.append(filtered_rank(scores, int(o)))
    return np.array(filt), np.array(raw)


def evaluate_object_prediction(scorer, test, known_true, hits_levels=DEFAULT_HITS) -> MetricsReport:
    if len(_triples(test)) == 0:
        raise ValueError("test split is empty")
    filt, raw = object_ranks(scorer, test, known_true)
    return _report(filt, raw, hits_levels, "object")


def evaluate_po_sampling(scorer, test, known_true, hits_levels=(10, 50)) -> MetricsReport:
    """Rank the gold ``(p, o)`` pair among all predicate-object pairs of subject ``s``."""
    test = _triples(test)
    if len(test) == 0:
        raise ValueError("test split is empty")
    by_s = defaultdict(list)
    pairs_cache = {}
    filt, raw = [], []
    for s, p, o in known_true:
        by_s[s].append((p, o))
    for s, p, o in test:
        s, p, o = int(s), int(p), int(o)
        if s not in pairs_cache:
            pairs_cache.clear()
            pairs_cache[s] = np.asarray(scorer.score_pairs(s))
        grid = pairs_cache[s]
        n_ent = grid.shape[1]
        flat = grid.reshape(-1)
        gold = p * n_ent + o
        known = [pp * n_ent + oo for pp, oo in by_s[s]]
        filt.append(filtered_rank(flat, gold, known))
        raw.append(filtered_rank(flat, gold))
    return _report(np.array(filt), np.array(raw), hits_levels, "po")


def format_table(report: MetricsReport, label: str = "model") -> str:
    levels = sorted(report.hits)
    head = f"{'Method':<12} | {'MR':>8} | " + " | ".join(f"@{n:>4}" for n in levels)
    row = f"{label:<12} | {report.mr:>8.2f} | " + " | ".join(f"{100 * report.hits[n]:>5.2f}" for n in levels)
    return head + "\n" + row


class FrequencyScorer:
    """Ranks candidates by how often a sampler returned them.

    ``counts`` maps ``(p, o)`` to shot counts for one subject. Unsampled
    candidates score 0.
    """

    def __init__(self, counts_by_subject: dict[int, dict[tuple[int, int], int]], n_predicates: int,
                 n_entities: int):
        self.counts = counts_by_subject
        self.shape = (n_predicates, n_entities)

    def score_pairs(self, s: int) -> np.ndarray:
        grid = np.zeros(self.shape)
        for (p, o), c in self.counts.get(s, {}).items():
            grid[p, o] = c
        return grid

    def score_objects(self, s: int, p: int) -> np.ndarray:
        return self.score_pairs(s)[p]


# --------------------------------------------------------------------------
# top-n retrieval bound


def retrieval_probability_bound(eps: float, n: int) -> float:
    """Lower bound ``1 - (eps / (1 - eps))**n`` on top-``n`` retrieval success."""
    if not 0 <= eps < 0.5:
        raise ValueError("the bound needs 0 <= eps < 1/2")
    if n < 1:
        raise ValueError("n must be >= 1")
    return 1.0 - (eps / (1.0 - eps)) ** n


def perturb_to_error(chi: np.ndarray, eps: float, rng: np.random.Generator) -> np.ndarray:
    """Return ``chi + E`` with a random Gaussian ``E`` scaled so ``||E||_F = eps ||chi||_F``."""
    e = rng.standard_normal(chi.shape)
    e *= eps * np.linalg.norm(chi) / np.linalg.norm(e)
    return chi + e


@dataclass
class RetrievalTrial:
    eps: float
    n: int
    instances: int
    successes: int
    bound: float

    @property
    def rate(self) -> float:
        return self.successes / self.instances

    @property
    def holds(self) -> bool:
        return self.rate >= self.bound


def retrieval_monte_carlo(eps: float, n: int, instances: int = 1000, dims=(6, 4, 6), density: float = 0.15,
                       seed: int = 0, mode: str = "sample") -> RetrievalTrial:
    """Empirical top-``n`` retrieval success on random ``(chi, chi_hat)`` pairs.

    Each instance draws a random binary ``chi`` and a perturbation with
    ``||chi - chi_hat||_F = eps ||chi||_F`` exactly. In ``"sample"`` mode
    ``n`` entries are drawn from ``chi_hat`` with probability proportional
    to ``chi_hat**2`` and retrieval succeeds if any is a true triple. In
    ``"topn"`` mode a random ``(s, p)`` query with a true object is read out
    and succeeds if a true object is among the ``n`` largest scores.
    """
    if mode not in ("sample", "topn"):
        raise ValueError("mode must be 'sample' or 'topn'")
    bound = retrieval_probability_bound(eps, n)
    successes = 0
    for i in range(instances):
        rng = np.random.default_rng(seed + i)
        chi = (rng.random(dims) < density).astype(float)
        if not chi.any():
            chi[tuple(rng.integers(0, d) for d in dims)] = 1.0
        chi_hat = perturb_to_error(chi, eps, rng)
        if mode == "sample":
            w = chi_hat.reshape(-1) ** 2
            draws = rng.choice(w.size, size=n, p=w / w.sum())
            ok = bool(np.any(chi.reshape(-1)[draws] == 1.0))
        else:
            sp = np.argwhere(chi.any(axis=2))
            s, p = sp[rng.integers(len(sp))]
            top = np.argsort(-chi_hat[s, p], kind="stable")[:n]
            ok = bool(np.any(chi[s, p, top] == 1.0))
        successes += ok
    return RetrievalTrial(eps, n, instances, successes, bound)

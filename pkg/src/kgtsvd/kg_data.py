"""Triple files, vocabularies and the binary semantic tensor.

A triple file is UTF-8 text with one ``subject<TAB>predicate<TAB>object``
line per fact and no header. Entities share one vocabulary across the
subject and object roles, so the tensor has shape
``(n_entities, n_predicates, n_entities)``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .tensor_core import DEFAULT_DENSIFY_CAP, check_densify

logger = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")


class TripleFormatError(ValueError):
    """A line of a triple file does not have three tab-separated fields."""

    def __init__(self, path, line_number: int, line: str):
        self.path = str(path)
        self.line_number = line_number
        super().__init__(f"{path}:{line_number}: expected 3 tab-separated fields, got {line!r}")


class UnknownEntityError(KeyError):
    """Triples reference names missing from a frozen vocabulary."""

    def __init__(self, path, unknown: list[tuple[int, str]]):
        self.path = str(path)
        self.unknown = unknown
        self.count = len(unknown)
        first = ", ".join(f"line {n}: {name!r}" for n, name in unknown[:5])
        super().__init__(f"{path}: {self.count} triples reference unknown names ({first})")


@dataclass
class Vocab:
    """Ordered list of unique names with a dense 0-based index."""

    entries: list[str] = field(default_factory=list)
    index: dict[str, int] = field(default_factory=dict)

    @classmethod
    def from_entries(cls, entries) -> "Vocab":
        vocab = cls()
        for name in entries:
            vocab.add(name)
        return vocab

    def add(self, name: str) -> int:
        idx = self.index.get(name)
        if idx is None:
            idx = len(self.entries)
            self.entries.append(name)
            self.index[name] = idx
        return idx

    def copy(self) -> "Vocab":
        return Vocab(list(self.entries), dict(self.index))

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, name) -> bool:
        return name in self.index


@dataclass(frozen=True)
class TripleSet:
    """Deduplicated ``(s, p, o)`` id triples, stored sorted as an ``(n, 3)`` array."""

    triples: np.ndarray
    split_tag: str = "train"

    def __post_init__(self):
        arr = np.asarray(self.triples, dtype=np.int64).reshape(-1, 3)
        arr = np.unique(arr, axis=0) if len(arr) else arr
        object.__setattr__(self, "triples", arr)
        if self.split_tag not in SPLITS:
            raise ValueError(f"split_tag must be one of {SPLITS}")

    def __len__(self) -> int:
        return len(self.triples)

    def __iter__(self):
        return (tuple(int(v) for v in row) for row in self.triples)

    def as_set(self) -> set[tuple[int, int, int]]:
        return set(iter(self))


@dataclass(frozen=True)
class SparseBinaryTensor:
    """COO 0/1 tensor: listed index triples are 1, all others 0."""

    dims: tuple[int, int, int]
    nonzeros: np.ndarray

    @property
    def nnz(self) -> int:
        return len(self.nonzeros)

    def to_dense(self, cap: int = DEFAULT_DENSIFY_CAP) -> np.ndarray:
        check_densify(self.dims, cap)
        out = np.zeros(self.dims)
        if self.nnz:
            out[tuple(self.nonzeros.T)] = 1.0
        return out


@dataclass(frozen=True)
class DatasetStats:
    n_entities: int
    n_predicates: int
    n_train: int
    n_valid: int
    n_test: int

    @property
    def avg_node_degree(self) -> float:
        total = self.n_train + self.n_valid + self.n_test
        return total / self.n_entities if self.n_entities else 0.0

    def to_json(self) -> str:
        return json.dumps({**asdict(self), "avg_node_degree": self.avg_node_degree})


@dataclass
class IngestResult:
    triples: TripleSet
    entities: Vocab
    predicates: Vocab
    n_duplicates: int = 0
    n_rejected: int = 0


def ingest_triples(
    path,
    entities: Vocab | None = None,
    predicates: Vocab | None = None,
    frozen: bool = False,
    split_tag: str = "train",
    on_unknown: str = "raise",
) -> IngestResult:
    """Read a triple file, assigning ids in first-appearance order.

    With ``frozen=True`` the given vocabularies are not extended; lines
    naming unknown entities or predicates raise :class:`UnknownEntityError`
    (``on_unknown="raise"``) or are dropped and counted in ``n_rejected``
    (``on_unknown="skip"``).
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(path)
    if frozen and (entities is None or predicates is None):
        raise ValueError("frozen ingestion needs existing vocabularies")
    ents = entities.copy() if entities is not None else Vocab()
    preds = predicates.copy() if predicates is not None else Vocab()

    seen: set[tuple[int, int, int]] = set()
    rows: list[tuple[int, int, int]] = []
    unknown: list[tuple[int, str]] = []
    n_dup = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != 3 or not all(fields):
                raise TripleFormatError(path, lineno, line)
            s, p, o = fields
            if frozen:
                missing = [n for n, v in ((s, ents), (p, preds), (o, ents)) if n not in v]
                if missing:
                    unknown.append((lineno, missing[0]))
                    continue
                key = (ents.index[s], preds.index[p], ents.index[o])
            else:
                key = (ents.add(s), preds.add(p), ents.add(o))
            if key in seen:
                n_dup += 1
                continue
            seen.add(key)
            rows.append(key)

    if unknown and on_unknown == "raise":
        raise UnknownEntityError(path, unknown)
    if n_dup:
        logger.warning("%s: dropped %d duplicate triples", path, n_dup)
    if unknown:
        logger.warning("%s: rejected %d triples with unknown names", path, len(unknown))
    triples = TripleSet(np.array(rows, dtype=np.int64).reshape(-1, 3), split_tag)
    return IngestResult(triples, ents, preds, n_duplicates=n_dup, n_rejected=len(unknown))


def build_tensor(triples: TripleSet, dims) -> SparseBinaryTensor:
    dims = tuple(int(d) for d in dims)
    arr = triples.triples
    if len(arr) and (np.any(arr < 0) or np.any(arr >= np.array(dims))):
        raise ValueError(f"triple ids out of range for dims {dims}")
    return SparseBinaryTensor(dims, arr.copy())


@dataclass
class Dataset:
    """Train/valid/test splits sharing one pair of vocabularies."""

    entities: Vocab
    predicates: Vocab
    train: TripleSet
    valid: TripleSet
    test: TripleSet
    name: str = ""

    @property
    def n_entities(self) -> int:
        return len(self.entities)

    @property
    def n_predicates(self) -> int:
        return len(self.predicates)

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.n_entities, self.n_predicates, self.n_entities)

    def known_true(self) -> set[tuple[int, int, int]]:
        return self.train.as_set() | self.valid.as_set() | self.test.as_set()

    def train_tensor(self) -> SparseBinaryTensor:
        return build_tensor(self.train, self.dims)


def load_dataset(directory, name: str | None = None, on_unknown: str = "raise") -> Dataset:
    """Load ``train.txt``, ``valid.txt`` and ``test.txt`` from ``directory``.

    Vocabularies come from the training file only; validation and test
    files are read against the frozen vocabularies.
    """
    directory = Path(directory)
    tr = ingest_triples(directory / "train.txt")
    splits = {}
    for split in ("valid", "test"):
        res = ingest_triples(
            directory / f"{split}.txt",
            tr.entities,
            tr.predicates,
            frozen=True,
            split_tag=split,
            on_unknown=on_unknown,
        )
        splits[split] = res.triples
    return Dataset(tr.entities, tr.predicates, tr.triples, splits["valid"], splits["test"],
                   name=name or directory.name)


def kinship_dir() -> Path:
    """Directory of the bundled Kinship dataset."""
    return Path(str(resources.files("kgtsvd") / "data" / "kinship"))


def load_kinship() -> Dataset:
    return load_dataset(kinship_dir(), name="kinship")


def dataset_stats(dataset: Dataset) -> DatasetStats:
    return DatasetStats(
        n_entities=dataset.n_entities,
        n_predicates=dataset.n_predicates,
        n_train=len(dataset.train),
        n_valid=len(dataset.valid),
        n_test=len(dataset.test),
    )

"""Binary persistence for trained models.

Layout (little-endian): magic ``b"KGTS"``, ``uint16`` format version,
``uint8`` type tag (0 tensor SVD, 1 DistMult), three ``uint64`` dims,
``uint64`` rank, then float64 arrays in row-major order. Tensor SVD stores
``sigma, U1, U2, U3``; DistMult stores ``E, P``.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .baseline import DistMultModel
from .tsvd import TensorSVDModel

MAGIC = b"KGTS"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHB4Q")
_TAGS = {TensorSVDModel: 0, DistMultModel: 1}


class ModelFormatError(ValueError):
    """The file is not a readable model of this format version."""


def _arrays(model) -> list[np.ndarray]:
    if isinstance(model, TensorSVDModel):
        return [model.sigma, model.U1, model.U2, model.U3]
    return [model.entities, model.predicates]


def save_model(model, path) -> None:
    tag = _TAGS.get(type(model))
    if tag is None:
        raise TypeError(f"cannot save {type(model).__name__}")
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, tag, *model.dims, model.rank)
    with open(path, "wb") as fh:
        fh.write(header)
        for arr in _arrays(model):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_model(path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise ModelFormatError(f"{path}: truncated header")
    magic, version, tag, d1, d2, d3, r = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ModelFormatError(f"{path}: not a model file")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    if tag == 0:
        shapes = [(r,), (d1, r), (d2, r), (d3, r)]
    elif tag == 1:
        shapes = [(d1, r), (d2, r)]
    else:
        raise ModelFormatError(f"{path}: unknown model type tag {tag}")
    expected = _HEADER.size + 8 * sum(int(np.prod(s)) for s in shapes)
    if len(raw) != expected:
        raise ModelFormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    arrays, offset = [], _HEADER.size
    for shape in shapes:
        n = int(np.prod(shape))
        arrays.append(np.frombuffer(raw, dtype="<f8", count=n, offset=offset).astype(np.float64).reshape(shape))
        offset += 8 * n
    if tag == 0:
        return TensorSVDModel(*arrays)
    return DistMultModel(*arrays)

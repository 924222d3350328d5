"""Representational similarity analysis between two encoders with the same shape.

For each layer, snippets are mean-pooled into vectors, turned into a cosine
similarity matrix, and the two models' matrices are compared by Pearson
correlation over the strict upper triangle.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .corpus import CorpusRecord
from .data import pooled_features
from .model import EncoderParams
from .numcore import DegenerateVectorError, RngStream

FAIRLY_SIMILAR = 0.8
DISSIMILAR = 0.5


class UndefinedCorrelationError(ValueError):
    pass


class ShapeMismatchError(ValueError):
    pass


def repr_vectors(params: EncoderParams, seqs: Sequence[Sequence[int]], pad_id: int,
                 layer: int | None = None) -> np.ndarray:
    """Pooled vectors in float64: (N, d) for one layer, (N, L+1, d) for all."""
    if any(len(s) == 0 for s in seqs):
        raise ValueError("empty snippet")
    v = pooled_features(params, seqs, pad_id, dtype=np.float64)
    return v if layer is None else v[:, layer]


def distance_matrix(vectors, names: Sequence[str] | None = None) -> np.ndarray:
    """Pairwise cosine similarity; symmetric with a unit diagonal."""
    v = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(v, axis=1)
    bad = np.flatnonzero(norms == 0)
    if len(bad):
        who = names[bad[0]] if names is not None else f"#{bad[0]}"
        raise DegenerateVectorError(f"snippet {who} has a zero-norm representation")
    u = v / norms[:, None]
    a = np.clip(u @ u.T, -1.0, 1.0)
    a = (a + a.T) / 2.0
    np.fill_diagonal(a, 1.0)
    return a


def upper_triangle(m: np.ndarray) -> np.ndarray:
    return m[np.triu_indices(m.shape[0], k=1)]


def pearson(m1, m2) -> float:
    """Pearson correlation of the strict upper triangles of two N x N matrices."""
    m1, m2 = np.asarray(m1, dtype=np.float64), np.asarray(m2, dtype=np.float64)
    if m1.shape != m2.shape or m1.ndim != 2 or m1.shape[0] != m1.shape[1]:
        raise ValueError(f"need two equal square matrices, got {m1.shape} and {m2.shape}")
    if m1.shape[0] < 3:
        raise ValueError("need N >= 3")
    a, b = upper_triangle(m1), upper_triangle(m2)
    a, b = a - a.mean(), b - b.mean()
    saa, sbb = np.dot(a, a), np.dot(b, b)
    if saa == 0 or sbb == 0:
        raise UndefinedCorrelationError("a similarity triangle has zero variance")
    # sqrt(s*s) == s in IEEE arithmetic, so identical inputs give exactly 1.0
    return float(np.clip(np.dot(a, b) / np.sqrt(saa * sbb), -1.0, 1.0))


def band(rho: float) -> str:
    if rho >= FAIRLY_SIMILAR:
        return "fairly similar"
    if rho < DISSIMILAR:
        return "dissimilar"
    return "intermediate"


def rsa_from_vectors(va, vb) -> list[float]:
    """Per-layer correlations for stacked vectors of shape (N, L+1, d)."""
    va, vb = np.asarray(va), np.asarray(vb)
    if va.shape[:2] != vb.shape[:2]:
        raise ShapeMismatchError(f"vector stacks differ: {va.shape} vs {vb.shape}")
    return [pearson(distance_matrix(va[:, l]), distance_matrix(vb[:, l])) for l in range(va.shape[1])]


@dataclass
class RsaReport:
    rho: list[float]
    n: int
    snippet_hash: str
    model_a: str
    model_b: str
    seed: int | None = None
    config_hash: str = ""
    meta: dict = field(default_factory=lambda: {"triangle": "strict upper", "pooling": "non-pad incl. specials"})

    @property
    def bands(self) -> list[str]:
        return [band(r) for r in self.rho]

    def to_json(self) -> dict:
        return {"layers": [{"l": l, "rho": r, "band": b} for l, (r, b) in enumerate(zip(self.rho, self.bands))],
                "N": self.n, "seed": self.seed, "modelA": self.model_a, "modelB": self.model_b,
                "snippet_hash": self.snippet_hash, "config_hash": self.config_hash, "meta": self.meta}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "rho", "band"])
        for l, (r, b) in enumerate(zip(self.rho, self.bands)):
            w.writerow([l, repr(r), b])
        return buf.getvalue()


def check_compatible(a: EncoderParams, b: EncoderParams) -> None:
    ca, cb = a.config, b.config
    for k in ("num_layers", "hidden_dim", "vocab_size"):
        if getattr(ca, k) != getattr(cb, k):
            raise ShapeMismatchError(f"models differ in {k}: {getattr(ca, k)} vs {getattr(cb, k)}")


def rsa_compare(a: EncoderParams, b: EncoderParams, seqs: Sequence[Sequence[int]], pad_id: int,
                names: tuple[str, str] = ("A", "B"), snippet_hash: str = "", seed: int | None = None) -> RsaReport:
    check_compatible(a, b)
    if len(seqs) < 3:
        raise ValueError("need at least 3 snippets")
    va = repr_vectors(a, seqs, pad_id)
    vb = repr_vectors(b, seqs, pad_id)
    return RsaReport(rsa_from_vectors(va, vb), len(seqs), snippet_hash or hash_snippets(seqs),
                     names[0], names[1], seed)


def hash_snippets(items: Sequence) -> str:
    h = hashlib.sha256()
    for it in items:
        h.update(json.dumps(it if not isinstance(it, CorpusRecord) else it.id).encode())
        h.update(b"\n")
    return h.hexdigest()[:16]


def sample_snippets(records: Sequence[CorpusRecord], n: int, seed: int) -> tuple[list[CorpusRecord], str]:
    """Uniform sample without replacement, kept in corpus order; returns (sample, hash)."""
    if n > len(records):
        raise ValueError(f"asked for {n} snippets from a corpus of {len(records)}")
    if n < 1:
        raise ValueError("n must be positive")
    idx = RngStream(seed).child("rsa-sample").gen.permutation(len(records))[:n]
    chosen = [records[i] for i in sorted(idx)]
    return chosen, hash_snippets(chosen)

"""Turning code, descriptions and AST-Only trees into model inputs, and extracting features."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numcore as nc
from .codeprops import ast_only, parse, serialize_ast
from .corpus.vocab import Vocabulary, tokenize
from .model import EncoderParams, encode


@dataclass
class Codec:
    """Builds ``[CLS] ... [SEP]`` id sequences bounded by ``max_len``."""

    vocab: Vocabulary
    max_len: int = 128

    def wrap(self, ids: Sequence[int]) -> list[int]:
        body = list(ids)[: self.max_len - 2]
        return [self.vocab.cls_id, *body, self.vocab.sep_id]

    def code(self, text: str) -> list[int]:
        return self.wrap(self.vocab.encode(text))

    def code_with_alignment(self, text: str) -> tuple[list[int], list[int]]:
        """Ids plus the sequence position of every lexer token (offset by [CLS])."""
        toks, align = tokenize(text)
        if len(toks) > self.max_len - 2:
            raise ValueError(f"code has {len(toks)} tokens; the limit is {self.max_len - 2}")
        return self.wrap(self.vocab.encode_tokens(toks)), [a + 1 for a in align]

    def doc(self, text: str) -> list[int]:
        return self.wrap(self.vocab.encode(text))

    def ast(self, code: str) -> list[int]:
        return self.wrap(self.vocab.encode_tokens(serialize_ast(ast_only(parse(code)))))

    def fits(self, text: str) -> bool:
        return len(tokenize(text)[0]) <= self.max_len - 2


def pad_batch(seqs: Sequence[Sequence[int]], pad_id: int) -> tuple[np.ndarray, np.ndarray]:
    if not seqs:
        raise ValueError("empty batch")
    n = max(len(s) for s in seqs)
    if n == 0:
        raise ValueError("batch of empty sequences")
    ids = np.full((len(seqs), n), pad_id, dtype=np.int64)
    mask = np.zeros((len(seqs), n), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
        mask[i, :len(s)] = True
    return ids, mask


def _length_batches(seqs: Sequence[Sequence[int]], batch_size: int):
    order = np.argsort([len(s) for s in seqs], kind="stable")
    for start in range(0, len(order), batch_size):
        yield order[start:start + batch_size]


def token_features(params: EncoderParams, seqs: Sequence[Sequence[int]], pad_id: int,
                   batch_size: int = 64) -> list[np.ndarray]:
    """Per-sequence stacks of all layer outputs, each of shape (L+1, n_i, d)."""
    out: list[np.ndarray | None] = [None] * len(seqs)
    with nc.no_grad():
        for idx in _length_batches(seqs, batch_size):
            ids, mask = pad_batch([seqs[i] for i in idx], pad_id)
            hs = np.stack([h.data for h in encode(ids, mask, params)], axis=1)  # B, L+1, n, d
            for row, i in enumerate(idx):
                out[i] = hs[row, :, :len(seqs[i])].copy()
    return out


def pooled_features(params: EncoderParams, seqs: Sequence[Sequence[int]], pad_id: int,
                    batch_size: int = 64, dtype=np.float64) -> np.ndarray:
    """Mean over non-pad positions (specials included) for every layer: (N, L+1, d)."""
    if any(len(s) == 0 for s in seqs):
        raise ValueError("cannot pool an empty sequence")
    L1, d = params.config.num_layers + 1, params.config.hidden_dim
    out = np.zeros((len(seqs), L1, d), dtype=dtype)
    with nc.no_grad():
        for idx in _length_batches(seqs, batch_size):
            ids, mask = pad_batch([seqs[i] for i in idx], pad_id)
            w = (mask / mask.sum(axis=1, keepdims=True)).astype(dtype)
            for l, h in enumerate(encode(ids, mask, params)):
                out[idx, l] = np.einsum("bn,bnd->bd", w, h.data.astype(dtype))
    return out

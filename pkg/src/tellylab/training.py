"""Masked-LM pretraining loop and small training utilities shared by probes and fine-tuning."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import numcore as nc
from .corpus import CorpusRecord
from .data import Codec, pad_batch
from .model import EncoderParams, SkipBatch, masked_lm_loss
from .numcore import RngStream


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 1200
    batch_size: int = 32
    lr: float = 1e-3
    warmup: int = 100
    mask_prob: float = 0.15
    sources: tuple[str, ...] = ("code", "ast", "doc")


def mlm_sequences(records: Sequence[CorpusRecord], codec: Codec, sources=("code", "ast", "doc")) -> list[list[int]]:
    """Training sequences: each record's code, its AST-Only serialization and its description."""
    seqs = []
    for r in records:
        if "code" in sources:
            seqs.append(codec.code(r.code))
        if "ast" in sources:
            seqs.append(codec.ast(r.code))
        if "doc" in sources and r.doc:
            seqs.append(codec.doc(r.doc))
    return seqs


def warmup_lr(base: float, warmup: int, step: int) -> float:
    return base * min(1.0, (step + 1) / warmup) if warmup > 0 else base


def bucketed_batches(lengths: Sequence[int], batch_size: int, gen: np.random.Generator):
    """One epoch of index batches grouped by similar length, in random batch order."""
    lengths = np.asarray(lengths, dtype=np.float64)
    jitter = gen.random(len(lengths)) * 4.0
    order = np.argsort(lengths + jitter, kind="stable")
    batches = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    for j in gen.permutation(len(batches)):
        yield batches[j]


def endless_batches(lengths: Sequence[int], batch_size: int, gen: np.random.Generator):
    while True:
        yield from bucketed_batches(lengths, batch_size, gen)


def pretrain(params: EncoderParams, seqs: Sequence[Sequence[int]], pad_id: int, mask_id: int,
             special_ids: Sequence[int], cfg: PretrainConfig, rng: RngStream,
             on_step: Callable[[int, float], None] | None = None) -> list[float]:
    """Masked-LM training in place; returns the per-step loss (NaN for skipped batches)."""
    opt = nc.Adam(params.trainable(), lr=cfg.lr)
    batches = endless_batches([len(s) for s in seqs], cfg.batch_size, rng.child("batches").gen)
    mask_rng = rng.child("mask")
    losses = []
    for step in range(cfg.steps):
        idx = next(batches)
        ids, mask = pad_batch([seqs[i] for i in idx], pad_id)
        opt.lr = warmup_lr(cfg.lr, cfg.warmup, step)
        opt.zero_grad()
        try:
            loss = masked_lm_loss(ids, mask, params, cfg.mask_prob, mask_rng, mask_id, special_ids)
        except SkipBatch:
            losses.append(float("nan"))
            continue
        loss.backward()
        opt.step()
        losses.append(float(loss.data))
        if on_step:
            on_step(step, losses[-1])
    return losses


def smooth(values: Sequence[float], window: int) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    v = v[~np.isnan(v)]
    if len(v) < window:
        return v
    kernel = np.ones(window) / window
    return np.convolve(v, kernel, mode="valid")


class Stopwatch:
    """Monotonic wall-clock timer."""

    def __init__(self):
        self.start = time.perf_counter()

    def lap(self) -> float:
        now = time.perf_counter()
        out, self.start = now - self.start, now
        return out

    def elapsed(self) -> float:
        return time.perf_counter() - self.start


class EarlyStopper:
    """Tracks the best validation score (higher is better) and signals when patience runs out."""

    def __init__(self, patience: int = 5):
        self.patience = patience
        self.best = -np.inf
        self.best_epoch = -1
        self.bad = 0

    def update(self, score: float, epoch: int) -> bool:
        """Record ``score``; True when it improved on the best so far."""
        if score > self.best:
            self.best, self.best_epoch, self.bad = score, epoch, 0
            return True
        self.bad += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad >= self.patience

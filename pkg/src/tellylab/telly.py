"""Layer-freezing fine-tuning (Telly-K) with parameter, time and metric accounting.

Telly-K freezes the embedding group and encoder layers 1..K; layers K+1..L
and the task head train. ``K=None`` is the full fine-tuning base run.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import statistics
import warnings
from dataclasses import asdict, dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import numcore as nc
from .corpus import CorpusRecord, SplitSpec, make_splits
from .corpus.vocab import INDENT, NEWLINE, tokenize
from .data import Codec, pad_batch
from .model import EncoderParams, ModelConfig, SkipBatch, causal_lm_loss, encode, group_of, lm_logits, param_count
from .numcore import Parameter, RngStream, Tensor
from .training import EarlyStopper, Stopwatch

log = logging.getLogger(__name__)

TASK_METRICS = {
    "search": ("mrr", "r@1", "r@5", "r@10"),
    "clone": ("p", "r", "f1"),
    "completion": ("edit_sim", "em"),
}
SELECTION_METRIC = {"search": "mrr", "clone": "f1", "completion": "edit_sim"}


class FrozenDriftError(RuntimeError):
    """A frozen parameter group changed during fine-tuning."""


# -- freezing ------------------------------------------------------------------------

@dataclass(frozen=True)
class FreezePlan:
    k: int | None
    num_layers: int
    frozen_groups: tuple[int, ...]
    trainable_encoder: int
    frozen_encoder: int

    @classmethod
    def make(cls, config: ModelConfig, k: int | None) -> "FreezePlan":
        L = config.num_layers
        if k is not None and not 0 <= k <= L:
            raise ValueError(f"K must be in [0, {L}], got {k}")
        counts = param_count(config, k)
        groups = () if k is None else tuple(range(k + 1))
        return cls(k, L, groups, counts["trainable"], counts["frozen"])

    @property
    def label(self) -> str:
        return "base" if self.k is None else f"telly-{self.k}"


def apply_freeze(params: EncoderParams, k: int | None) -> FreezePlan:
    """Freeze groups 0..K and unfreeze everything else (LM head included)."""
    plan = FreezePlan.make(params.config, k)
    frozen = set(plan.frozen_groups)
    for p in params:
        p.trainable = group_of(p.name) not in frozen
    return plan


def frozen_checksums(params: EncoderParams, plan: FreezePlan) -> dict:
    return {g: nc.checksum(params.group(g)) for g in plan.frozen_groups}


# -- metrics -------------------------------------------------------------------------

def _ranks(ranks) -> np.ndarray:
    r = np.asarray(ranks)
    if r.size == 0:
        raise ValueError("no ranks given")
    if (r < 1).any():
        raise ValueError("ranks start at 1")
    return r


def metric_mrr(ranks) -> float:
    return float(np.mean(1.0 / _ranks(ranks)))


def metric_recall_at_k(ranks, k: int) -> float:
    return float(np.mean(_ranks(ranks) <= k))


def metric_prf(predictions, labels) -> dict:
    p = np.asarray(predictions).astype(bool)
    y = np.asarray(labels).astype(bool)
    if p.shape != y.shape:
        raise ValueError("predictions and labels differ in length")
    tp = int((p & y).sum())
    prec = tp / int(p.sum()) if p.any() else 0.0
    rec = tp / int(y.sum()) if y.any() else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0
    return {"p": prec, "r": rec, "f1": f1}


def levenshtein(a: Sequence, b: Sequence) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def metric_edit_sim(a: str, b: str) -> float:
    if not a and not b:
        return 1.0
    return 1.0 - levenshtein(a, b) / max(len(a), len(b))


def metric_em(a: str, b: str) -> int:
    return int(" ".join(a.split()) == " ".join(b.split()))


def rank_of_truth(scores: np.ndarray) -> np.ndarray:
    """Row i's rank of column i: one plus the number of strictly higher scores."""
    s = np.asarray(scores)
    diag = np.diag(s)
    return 1 + (s > diag[:, None]).sum(axis=1)


# -- shared pieces ---------------------------------------------------------------------

def pooled_last(params: EncoderParams, ids: np.ndarray, mask: np.ndarray) -> Tensor:
    """Differentiable mean over non-pad positions of the last layer: (B, d)."""
    h = encode(ids, mask, params, causal=False)[-1]
    w = (mask / mask.sum(axis=1, keepdims=True)).astype(h.dtype)[:, None, :]
    return (Tensor(w) @ h).reshape(ids.shape[0], h.shape[-1])


def _chunks(n: int, size: int) -> Iterator[np.ndarray]:
    for s in range(0, n, size):
        yield np.arange(s, min(n, s + size))


def _pool_all(params: EncoderParams, seqs: Sequence[Sequence[int]], pad_id: int, batch: int = 64) -> np.ndarray:
    out = np.zeros((len(seqs), params.config.hidden_dim))
    order = np.argsort([len(s) for s in seqs], kind="stable")
    with nc.no_grad():
        for idx in _chunks(len(order), batch):
            rows = order[idx]
            ids, mask = pad_batch([seqs[i] for i in rows], pad_id)
            out[rows] = pooled_last(params, ids, mask).data
    return out


class Task:
    kind: str = ""
    unused_groups: tuple = ("lm_head",)   # backbone parts the task never reads; kept out of training

    def __init__(self, codec: Codec):
        self.codec = codec

    @property
    def pad(self) -> int:
        return self.codec.vocab.pad_id

    def prepare(self, params: EncoderParams) -> None:
        """Adjust the backbone before freezing (e.g. untie the LM head)."""

    def init_head(self, params: EncoderParams, rng: RngStream) -> list[Parameter]:
        return []

    def train_size(self) -> int:
        raise NotImplementedError

    def loss(self, params: EncoderParams, head: list[Parameter], idx: np.ndarray) -> Tensor:
        raise NotImplementedError

    def evaluate(self, params: EncoderParams, head: list[Parameter], split: str) -> dict:
        raise NotImplementedError


# -- code search -----------------------------------------------------------------------

class SearchTask(Task):
    """Dual encoder with a shared backbone; in-batch softmax contrastive loss."""

    kind = "search"

    def __init__(self, records: Sequence[CorpusRecord], codec: Codec, spec: SplitSpec = SplitSpec(),
                 temperature: float = 0.05, train_limit: int | None = None, eval_limit: int | None = None):
        super().__init__(codec)
        self.temperature = temperature
        self.data = {}
        for name, recs in make_splits(records, spec).items():
            limit = train_limit if name == "train" else eval_limit
            recs = recs[:limit] if limit else recs
            self.data[name] = ([codec.code(r.code) for r in recs], [codec.doc(r.doc) for r in recs])

    def train_size(self) -> int:
        return len(self.data["train"][0])

    def scores(self, params: EncoderParams, codes, queries) -> Tensor:
        # separate batches: queries are much shorter than code, so joint padding wastes most of the work
        zc = nc.l2_normalize(pooled_last(params, *pad_batch(list(codes), self.pad)))
        zq = nc.l2_normalize(pooled_last(params, *pad_batch(list(queries), self.pad)))
        return zq @ zc.T

    def loss(self, params, head, idx):
        codes, queries = self.data["train"]
        s = self.scores(params, [codes[i] for i in idx], [queries[i] for i in idx])
        return nc.cross_entropy(s * (1.0 / self.temperature), np.arange(len(idx)))

    def evaluate(self, params, head, split):
        codes, queries = self.data[split]
        zc = _pool_all(params, codes, self.pad)
        zq = _pool_all(params, queries, self.pad)
        zc /= np.linalg.norm(zc, axis=1, keepdims=True)
        zq /= np.linalg.norm(zq, axis=1, keepdims=True)
        ranks = rank_of_truth(zq @ zc.T)
        return {"mrr": metric_mrr(ranks), "r@1": metric_recall_at_k(ranks, 1),
                "r@5": metric_recall_at_k(ranks, 5), "r@10": metric_recall_at_k(ranks, 10)}


# -- clone detection -------------------------------------------------------------------

def clone_pairs(clusters, rng: np.random.Generator) -> list[tuple[str, str, int]]:
    """One positive and one negative pair per variant: balanced labels."""
    out = []
    for ci, c in enumerate(clusters):
        for i, code in enumerate(c.codes):
            j = int(rng.integers(len(c.codes) - 1))
            j += j >= i
            out.append((code, c.codes[j], 1))
            other = clusters[(ci + 1 + int(rng.integers(len(clusters) - 1))) % len(clusters)]
            out.append((code, other.codes[int(rng.integers(len(other.codes)))], 0))
    return out


def canonical_order(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """True where row u sorts after row v lexicographically (then the pair is swapped)."""
    diff = u != v
    first = np.where(diff.any(axis=1), diff.argmax(axis=1), 0)
    rows = np.arange(len(u))
    return diff.any(axis=1) & (u[rows, first] > v[rows, first])


class CloneTask(Task):
    """2-layer perceptron over [a; b; |a-b|; a*b] of the canonically ordered pooled pair."""

    kind = "clone"

    def __init__(self, clusters, codec: Codec, rng: RngStream, ratios=(0.6, 0.2, 0.2),
                 train_limit: int | None = None):
        super().__init__(codec)
        n = len(clusters)
        n_train, n_valid = int(round(ratios[0] * n)), int(round(ratios[1] * n))
        if min(n_train, n_valid, n - n_train - n_valid) < 2:
            raise ValueError("too few clusters to split for clone detection")
        parts = {"train": clusters[:n_train], "valid": clusters[n_train:n_train + n_valid],
                 "test": clusters[n_train + n_valid:]}
        self.data = {}
        for name, cs in parts.items():
            pairs = clone_pairs(cs, rng.child(name).gen)
            if name == "train" and train_limit:
                pairs = pairs[:train_limit]
            self.data[name] = ([codec.code(a) for a, _, _ in pairs], [codec.code(b) for _, b, _ in pairs],
                               np.array([y for _, _, y in pairs]))

    def train_size(self) -> int:
        return len(self.data["train"][2])

    def init_head(self, params, rng):
        d = params.config.hidden_dim
        dt = params.t("embed.tok").dtype
        return [Parameter("clone.w1", rng.truncated_normal((4 * d, d), dtype=dt)),
                Parameter("clone.b1", np.zeros(d, dt)),
                Parameter("clone.w2", rng.truncated_normal((d, 1), dtype=dt)),
                Parameter("clone.b2", np.zeros(1, dt))]

    @staticmethod
    def logits(head, u: Tensor, v: Tensor) -> Tensor:
        swap = canonical_order(u.data, v.data).astype(u.dtype)[:, None]
        a = u * (1.0 - swap) + v * swap
        b = v * (1.0 - swap) + u * swap
        feats = nc.concat([a, b, nc.tabs(a - b), a * b], axis=-1)
        w1, b1, w2, b2 = (p.value for p in head)
        hidden = nc.tanh(feats @ w1 + b1)
        return (hidden @ w2 + b2).reshape(u.shape[0])

    def pair_logits(self, params, head, left, right) -> Tensor:
        n = len(left)
        ids, mask = pad_batch(list(left) + list(right), self.pad)
        z = pooled_last(params, ids, mask)
        return self.logits(head, z[:n], z[n:])

    def loss(self, params, head, idx):
        left, right, y = self.data["train"]
        out = self.pair_logits(params, head, [left[i] for i in idx], [right[i] for i in idx])
        return nc.binary_cross_entropy_with_logits(out, y[idx])

    def probabilities(self, params, head, left, right) -> np.ndarray:
        out = []
        with nc.no_grad():
            for idx in _chunks(len(left), 64):
                lg = self.pair_logits(params, head, [left[i] for i in idx], [right[i] for i in idx])
                out.append(nc.sigmoid(lg).data)
        return np.concatenate(out)

    def evaluate(self, params, head, split):
        left, right, y = self.data[split]
        return metric_prf(self.probabilities(params, head, left, right) > 0.5, y)


# -- line-level completion ----------------------------------------------------------------

@dataclass(frozen=True)
class CompletionExample:
    context: tuple[int, ...]
    target: tuple[str, ...]


def line_spans(tokens: Sequence[str]) -> list[tuple[int, int]]:
    """[start, end) of every line in a tokenized snippet, NEWLINE excluded."""
    spans, start = [], 0
    for i, t in enumerate(tokens):
        if t == NEWLINE:
            spans.append((start, i))
            start = i + 1
    if start < len(tokens):
        spans.append((start, len(tokens)))
    return spans


def completion_examples(records: Sequence[CorpusRecord], codec: Codec, rng: np.random.Generator,
                        ) -> list[CompletionExample]:
    """Context = [CLS] plus every token before a randomly chosen non-first line; target = that line."""
    out = []
    for r in records:
        toks, _ = tokenize(r.code)
        spans = line_spans(toks)
        if len(spans) < 2:
            continue
        s, e = spans[1 + int(rng.integers(len(spans) - 1))]
        ctx = [codec.vocab.cls_id] + codec.vocab.encode_tokens(toks[:s])
        out.append(CompletionExample(tuple(ctx), tuple(toks[s:e])))
    return out


def line_text(tokens: Sequence[str]) -> str:
    return " ".join(t for t in tokens if t != INDENT)


def complete_line(context: Sequence[int], params: EncoderParams, vocab, max_len: int = 32) -> list[str]:
    """Greedy causal decoding until NEWLINE or ``max_len`` tokens."""
    limit = params.config.max_positions
    ctx = list(context)
    if len(ctx) >= limit:
        warnings.warn(f"context of {len(ctx)} tokens truncated to the last {limit - 1}", stacklevel=2)
        ctx = ctx[-(limit - 1):]
    out: list[str] = []
    with nc.no_grad():
        for _ in range(max_len):
            if len(ctx) >= limit:
                ctx = ctx[1:]
            ids = np.asarray([ctx])
            h = encode(ids, None, params, causal=True)[-1]
            nxt = int(lm_logits(h[:, -1], params).data[0].argmax())
            if nxt == vocab.newline_id:
                break
            out.append(vocab.tokens[nxt])
            ctx.append(nxt)
    return out


class CompletionTask(Task):
    """The encoder in causal mode with an untied LM head that stays trainable for every K."""

    kind = "completion"
    unused_groups = ()

    def __init__(self, records: Sequence[CorpusRecord], codec: Codec, rng: RngStream,
                 spec: SplitSpec = SplitSpec(), train_limit: int | None = None,
                 eval_limit: int | None = None, max_new: int = 32):
        super().__init__(codec)
        self.max_new = max_new
        self.train_seqs = []
        self.examples = {}
        for name, recs in make_splits(records, spec).items():
            if name == "train":
                recs = recs[:train_limit] if train_limit else recs
                self.train_seqs = [codec.code(r.code) for r in recs]
            else:
                recs = recs[:eval_limit] if eval_limit else recs
                self.examples[name] = completion_examples(recs, codec, rng.child(name).gen)

    def prepare(self, params):
        params.untie_lm_head()

    def train_size(self) -> int:
        return len(self.train_seqs)

    def loss(self, params, head, idx):
        ids, mask = pad_batch([self.train_seqs[i] for i in idx], self.pad)
        return causal_lm_loss(ids, mask, params)

    def evaluate(self, params, head, split):
        sims, ems = [], []
        for ex in self.examples[split]:
            pred = line_text(complete_line(ex.context, params, self.codec.vocab, self.max_new))
            gold = line_text(ex.target)
            sims.append(metric_edit_sim(pred, gold))
            ems.append(metric_em(pred, gold))
        return {"edit_sim": float(np.mean(sims)), "em": float(np.mean(ems))}


# -- fine-tuning -------------------------------------------------------------------------

@dataclass(frozen=True)
class FinetuneConfig:
    lr: float = 5e-4
    batch_size: int = 32
    max_epochs: int = 30
    patience: int = 3
    max_steps: int | None = None        # hard cap on optimizer steps (smoke and invariant runs)
    evaluate: bool = True


@dataclass
class SeedRun:
    seed: int
    metrics: dict
    valid_metrics: dict
    epoch_seconds: list[float]
    convergence_seconds: float
    best_epoch: int
    steps: int


@dataclass
class RunReport:
    task: str
    k: int | None
    params_trainable: int
    params_encoder_trainable: int
    params_head: int
    params_base_trainable: int
    epoch_seconds: float | None
    convergence_seconds: float | None
    metrics: dict
    seeds: list[int]
    per_seed: list[SeedRun] = field(default_factory=list)
    delta_pct: dict = field(default_factory=dict)
    frozen_groups_verified: list = field(default_factory=list)
    model: str = "toy"
    config_hash: str = ""
    timing: dict = field(default_factory=lambda: {
        "noisy": True, "clock": "perf_counter",
        "epoch_seconds": "median over seeds of the median per-epoch time, first epoch excluded as warm-up"})

    @property
    def label(self) -> str:
        return "base" if self.k is None else f"telly-{self.k}"

    @property
    def params_reduction_pct(self) -> float:
        return 100.0 * (1.0 - self.params_trainable / self.params_base_trainable)

    def compare_to(self, base: "RunReport") -> None:
        self.delta_pct = {m: (100.0 * (v - base.metrics[m]) / base.metrics[m] if base.metrics[m] else None)
                          for m, v in self.metrics.items()}

    def to_json(self) -> dict:
        d = asdict(self)
        d["params_reduction_pct"] = self.params_reduction_pct
        d["label"] = self.label
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True, default=str)


@dataclass
class FinetuneResult:
    report: RunReport
    models: dict[int, EncoderParams]      # fine-tuned backbone per seed


def head_param_count(task: Task, config: ModelConfig) -> int:
    """Task-specific trainable parameters outside the encoder groups."""
    d, V = config.hidden_dim, config.vocab_size
    if task.kind == "search":
        return 0
    if task.kind == "clone":
        return 4 * d * d + d + d + 1
    return V * d + V  # untied LM head: weight plus bias


def _run_seed(task: Task, base: EncoderParams, k: int | None, cfg: FinetuneConfig,
              seed: int) -> tuple[SeedRun, EncoderParams, int]:
    params = base.copy()
    task.prepare(params)
    plan = apply_freeze(params, k)
    for g in task.unused_groups:
        for p in params.group(g):
            p.trainable = False
    rng = RngStream(seed).child("finetune", task.kind)
    head = task.init_head(params, rng.child("head"))
    trainable = params.trainable() + head
    n_trainable = sum(p.size for p in trainable)
    before = frozen_checksums(params, plan)
    opt = nc.Adam(trainable, lr=cfg.lr)
    order = rng.child("order").gen
    stop = EarlyStopper(cfg.patience)
    sel = SELECTION_METRIC[task.kind]
    best = [p.data.copy() for p in trainable]
    epoch_times, valid_best, conv = [], {}, 0.0
    steps, total = 0, Stopwatch()
    for epoch in range(cfg.max_epochs):
        clock = Stopwatch()
        perm = order.permutation(task.train_size())
        for idx in _chunks(len(perm), cfg.batch_size):
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
            opt.zero_grad()
            try:
                loss = task.loss(params, head, perm[idx])
            except SkipBatch:
                continue
            if loss.requires_grad:  # False only when nothing is trainable (search at K=L)
                loss.backward()
                opt.step()
            steps += 1
        epoch_times.append(clock.elapsed())
        if cfg.evaluate:
            v = task.evaluate(params, head, "valid")
            if stop.update(v[sel], epoch):
                valid_best, conv = v, total.elapsed()
                best = [p.data.copy() for p in trainable]
        if stop.should_stop or (cfg.max_steps is not None and steps >= cfg.max_steps):
            break
    if cfg.evaluate:
        for p, b in zip(trainable, best):
            p.value.data[...] = b
    after = frozen_checksums(params, plan)
    drifted = [g for g in before if before[g] != after[g]]
    if drifted:
        raise FrozenDriftError(f"frozen groups {drifted} changed during fine-tuning")
    metrics = task.evaluate(params, head, "test") if cfg.evaluate else {}
    run = SeedRun(seed, metrics, valid_best, epoch_times, conv, stop.best_epoch, steps)
    return run, params, n_trainable


def epoch_seconds_of(runs: Sequence[SeedRun]) -> float | None:
    per_run = [statistics.median(r.epoch_seconds[1:]) for r in runs if len(r.epoch_seconds) > 1]
    return statistics.median(per_run) if per_run else None


def finetune(task: Task, params: EncoderParams, k: int | None, cfg: FinetuneConfig = FinetuneConfig(),
             seeds: Sequence[int] = (0, 1, 2), keep_models: bool = False) -> FinetuneResult:
    """Fine-tune a copy of ``params`` once per seed; ``params`` itself is never modified."""
    base_count = param_count(params.config, None)["trainable"]
    plan = FreezePlan.make(params.config, k)
    head = head_param_count(task, params.config)
    runs, models = [], {}
    for s in seeds:
        run, tuned, n_trainable = _run_seed(task, params, k, cfg, s)
        if n_trainable != plan.trainable_encoder + head:
            raise AssertionError(f"trainable count {n_trainable} != closed form {plan.trainable_encoder + head}")
        runs.append(run)
        if keep_models:
            models[s] = tuned
    metrics = {m: float(np.mean([r.metrics[m] for r in runs])) for m in runs[0].metrics}
    report = RunReport(
        task=task.kind, k=k, params_trainable=plan.trainable_encoder + head,
        params_encoder_trainable=plan.trainable_encoder, params_head=head,
        params_base_trainable=base_count + head,
        epoch_seconds=epoch_seconds_of(runs),
        convergence_seconds=float(np.median([r.convergence_seconds for r in runs])),
        metrics=metrics, seeds=list(seeds), per_seed=runs,
        frozen_groups_verified=list(plan.frozen_groups),
    )
    return FinetuneResult(report, models)


SWEEP_COLUMNS = ("model", "K", "params_trainable", "params_reduction_pct", "epoch_seconds",
                 "convergence_seconds")


def sweep(task: Task, params: EncoderParams, ks: Sequence[int], cfg: FinetuneConfig = FinetuneConfig(),
          seeds: Sequence[int] = (0, 1, 2), model_name: str = "toy") -> tuple[list[RunReport], list[dict]]:
    """Base run plus one run per K; failures are recorded and the sweep continues."""
    reports, failures = [], []
    base = None
    for k in [None, *ks]:
        try:
            rep = finetune(task, params, k, cfg, seeds).report
        except Exception as exc:  # recorded, not fatal
            log.error("run K=%s failed: %s", k, exc)
            failures.append({"K": k, "error": f"{type(exc).__name__}: {exc}"})
            continue
        rep.model = model_name
        if k is None:
            base = rep
        elif base is not None:
            rep.compare_to(base)
        reports.append(rep)
    return reports, failures


def sweep_csv(reports: Sequence[RunReport]) -> str:
    if not reports:
        return ",".join(SWEEP_COLUMNS) + "\n"
    metrics = list(reports[0].metrics)
    cols = list(SWEEP_COLUMNS) + metrics + [f"delta_pct_{m}" for m in metrics] + ["seeds"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in reports:
        w.writerow([r.model, "base" if r.k is None else r.k, r.params_trainable, repr(r.params_reduction_pct),
                    "" if r.epoch_seconds is None else repr(r.epoch_seconds), repr(r.convergence_seconds)]
                   + [repr(r.metrics[m]) for m in metrics]
                   + [repr(r.delta_pct[m]) if r.delta_pct.get(m) is not None else "" for m in metrics]
                   + [" ".join(map(str, r.seeds))])
    return buf.getvalue()

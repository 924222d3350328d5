"""Probing classifiers over frozen layer-wise representations.

Four tasks: token classes (lexical), code/AST-Only pairing (syntactic),
behaviour clusters (semantic) and cyclomatic-complexity buckets (structural).
Features are extracted once per model under ``no_grad``; only the layer mixer
and a small head are trained.
"""

from __future__ import annotations

import hashlib
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import numcore as nc
from .codeprops import CLASSES, ast_only, build_cfg, complexity_bucket, cyclomatic, lex_classify, parse, serialize_ast
from .codeprops.syntax import AstNode, unparse
from .corpus import CorpusRecord, SplitSpec, make_splits
from .corpus.generator import NOUNS, VERBS, generate_program
from .corpus.transforms import make_variant, sample_inputs, semantic_signature
from .corpus.vocab import tokenize
from .data import Codec, pooled_features, token_features
from .model import EncoderParams
from .numcore import Parameter, RngStream, Tensor
from .training import EarlyStopper, Stopwatch

log = logging.getLogger(__name__)

TASKS = ("lexical", "syntactic", "semantic", "structural")
SPLITS = ("train", "valid", "test")
NUM_BUCKETS = 10


class FrozenContractError(RuntimeError):
    """Probe training touched the backbone parameters."""


# -- datasets ------------------------------------------------------------------------

@dataclass(frozen=True)
class ProbeExample:
    inputs: tuple[str, ...]      # code, plus a serialized AST-Only for syntactic pairs
    label: int
    position: int | None = None  # lexer-token index for the lexical task


@dataclass
class ProbeDataset:
    task: str
    splits: dict[str, list[ProbeExample]]
    num_classes: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown probe task {self.task!r}")

    def sizes(self) -> dict[str, int]:
        return {k: len(v) for k, v in self.splits.items()}


def build_lexical_dataset(records: Sequence[CorpusRecord], spec: SplitSpec = SplitSpec()) -> ProbeDataset:
    """One example per lexer token; labels index ``CLASSES``."""
    index = {c: i for i, c in enumerate(CLASSES)}
    splits = {}
    for name, recs in make_splits(records, spec).items():
        splits[name] = [ProbeExample((r.code,), index[t.cls], pos)
                        for r in recs for pos, t in enumerate(lex_classify(r.code))]
    return ProbeDataset("lexical", splits, len(CLASSES), {"classes": list(CLASSES)})


def build_syntactic_dataset(records: Sequence[CorpusRecord], rng: RngStream | np.random.Generator,
                            spec: SplitSpec = SplitSpec()) -> ProbeDataset:
    """Balanced code/AST-Only pairs; negatives come from a different snippet of the same split
    whose AST-Only differs from the code's own."""
    if len(records) < 2:
        raise ValueError("syntactic probing needs at least two snippets to form negatives")
    gen = rng.gen if isinstance(rng, RngStream) else rng
    splits = {}
    collisions = 0
    for name, recs in make_splits(records, spec).items():
        shapes = [" ".join(serialize_ast(ast_only(parse(r.code)))) for r in recs]
        out = []
        for i, r in enumerate(recs):
            candidates = [j for j in range(len(recs)) if shapes[j] != shapes[i]]
            collisions += len(recs) - 1 - len(candidates)
            if not candidates:
                continue
            j = candidates[int(gen.integers(len(candidates)))]
            out.append(ProbeExample((r.code, shapes[i]), 1))
            out.append(ProbeExample((r.code, shapes[j]), 0))
        splits[name] = out
    return ProbeDataset("syntactic", splits, 2, {"shape_collisions_skipped": collisions})


def structural_label(code: str) -> int:
    funcs = parse(code).children
    if len(funcs) != 1:
        raise ValueError("structural probing expects exactly one function per snippet")
    return complexity_bucket(cyclomatic(build_cfg(funcs[0])), NUM_BUCKETS)


def build_structural_dataset(records: Sequence[CorpusRecord], spec: SplitSpec = SplitSpec()) -> ProbeDataset:
    """Label = bucket of M: classes 0..8 for M = 1..9 and 9 for M >= 10."""
    splits = {name: [ProbeExample((r.code,), structural_label(r.code)) for r in recs]
              for name, recs in make_splits(records, spec).items()}
    return ProbeDataset("structural", splits, NUM_BUCKETS)


@dataclass(frozen=True)
class SemanticCluster:
    problem: int
    codes: tuple[str, ...]
    transforms: tuple[tuple[str, ...], ...]
    signature: tuple


def semantic_clusters(problems: int, variants: int, rng: RngStream | np.random.Generator,
                      max_tokens: int = 120, max_attempts: int = 200, rename: bool = True) -> list[SemanticCluster]:
    """``problems`` behaviour classes with ``variants`` distinct implementations each.

    Variant 0 is the generated program; the rest are rewrites that keep the
    interpreter outputs identical on a fixed set of sample inputs. With
    ``rename`` every rewrite starts by renaming identifiers, and every snippet
    gets a random function name.
    """
    gen = rng.gen if isinstance(rng, RngStream) else rng
    out: list[SemanticCluster] = []
    seen_signatures = set()
    attempts = 0
    while len(out) < problems:
        attempts += 1
        if attempts > max_attempts:
            raise RuntimeError(f"could only build {len(out)} of {problems} semantic clusters")
        prog = generate_program(gen, max_tokens)
        if not prog.params:
            continue
        inputs = sample_inputs(len(prog.params), np.random.default_rng(0))
        sig = semantic_signature(prog.tree, inputs)
        if sig in seen_signatures:
            continue
        first = _with_fresh_name(prog.tree, gen) if rename else prog.tree
        codes = {unparse(first): ()}
        for _ in range(variants * 6):
            if len(codes) == variants:
                break
            res = make_variant(prog.tree, gen, kinds=["rename"], steps=1, inputs=inputs) if rename else None
            start, names = (res[0], res[1]) if res else (prog.tree, [])
            res = make_variant(start, gen, inputs=inputs, steps=2)
            if res is None:
                continue
            tree, names = res[0], names + res[1]
            text = unparse(_with_fresh_name(tree, gen) if rename else tree)
            if text not in codes and len(tokenize(text)[0]) <= max_tokens:
                codes[text] = tuple(names)
        if len(codes) < variants:
            continue
        seen_signatures.add(sig)
        out.append(SemanticCluster(len(out), tuple(codes), tuple(codes.values()), sig))
    return out


def _with_fresh_name(func: AstNode, gen: np.random.Generator) -> AstNode:
    """Same function under a random verb_noun name, so names carry no cluster identity."""
    name = f"{VERBS[int(gen.integers(len(VERBS)))]}_{NOUNS[int(gen.integers(len(NOUNS)))]}"
    kids = func.children
    return replace(func, children=(replace(kids[0], value=name),) + kids[1:])


def build_semantic_dataset(problems: int, variants: int, rng: RngStream | np.random.Generator,
                           ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)) -> ProbeDataset:
    """P clusters x S variants, split by problem so test clusters are unseen in training."""
    clusters = semantic_clusters(problems, variants, rng)
    n_train = max(2, int(round(ratios[0] * problems)))
    n_valid = max(2, int(round(ratios[1] * problems)))
    if n_train + n_valid + 2 > problems:
        raise ValueError("need enough problems for at least two clusters in every split")
    parts = {"train": clusters[:n_train], "valid": clusters[n_train:n_train + n_valid],
             "test": clusters[n_train + n_valid:]}
    splits = {name: [ProbeExample((code,), c.problem) for c in cs for code in c.codes]
              for name, cs in parts.items()}
    return ProbeDataset("semantic", splits, problems, {
        "problems": problems, "variants": variants,
        "transforms": {c.problem: [list(t) for t in c.transforms] for c in clusters},
    })


# -- features ------------------------------------------------------------------------

@dataclass
class FeatureSplit:
    x: np.ndarray            # (n, L+1, d), or (n, 2, L+1, d) for pairs
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.y)


def extract_features(dataset: ProbeDataset, params: EncoderParams, codec: Codec,
                     dtype=np.float32) -> dict[str, FeatureSplit]:
    """Frozen features for every split; the backbone is only read."""
    out = {}
    for name, examples in dataset.splits.items():
        if not examples:
            L1, d = params.config.num_layers + 1, params.config.hidden_dim
            shape = (0, 2, L1, d) if dataset.task == "syntactic" else (0, L1, d)
            out[name] = FeatureSplit(np.zeros(shape, dtype), np.zeros(0, np.int64))
            continue
        y = np.array([e.label for e in examples], dtype=np.int64)
        if dataset.task == "lexical":
            x = _lexical_rows(examples, params, codec, dtype)
        elif dataset.task == "syntactic":
            codes = [codec.code(e.inputs[0]) for e in examples]
            asts = [codec.wrap(codec.vocab.encode_tokens(e.inputs[1].split())) for e in examples]
            x = np.stack([_pooled_unique(codes, params, codec, dtype),
                          _pooled_unique(asts, params, codec, dtype)], axis=1)
        else:
            x = _pooled_unique([codec.code(e.inputs[0]) for e in examples], params, codec, dtype)
        out[name] = FeatureSplit(x, y)
    return out


def standardize(features: dict[str, FeatureSplit]) -> dict[str, FeatureSplit]:
    """Z-score every (layer, dim) with train-split statistics; pair members are scaled separately."""
    train = features["train"].x
    axes = 0
    mu = train.mean(axis=axes, keepdims=True)
    sd = train.std(axis=axes, keepdims=True)
    sd = np.where(sd > 1e-6, sd, 1.0)
    return {k: FeatureSplit(((f.x - mu) / sd).astype(f.x.dtype), f.y) for k, f in features.items()}


def _pooled_unique(seqs: list[list[int]], params, codec, dtype) -> np.ndarray:
    keys = [tuple(s) for s in seqs]
    uniq = list(dict.fromkeys(keys))
    where = {k: i for i, k in enumerate(uniq)}
    feats = pooled_features(params, [list(k) for k in uniq], codec.vocab.pad_id, dtype=np.float64)
    return feats[[where[k] for k in keys]].astype(dtype)


def _lexical_rows(examples, params, codec, dtype) -> np.ndarray:
    codes = list(dict.fromkeys(e.inputs[0] for e in examples))
    encoded = [codec.code_with_alignment(c) for c in codes]
    feats = token_features(params, [ids for ids, _ in encoded], codec.vocab.pad_id)
    index = {c: i for i, c in enumerate(codes)}
    rows = []
    for e in examples:
        i = index[e.inputs[0]]
        rows.append(feats[i][:, encoded[i][1][e.position]])
    return np.stack(rows).astype(dtype)


# -- probe models --------------------------------------------------------------------

class LayerMixer:
    """Softmax-normalized learned weights over H^0..H^L."""

    def __init__(self, num_layers_plus_one: int, dtype=np.float32):
        self.logits = Parameter("mixer.logits", np.zeros(num_layers_plus_one, dtype=dtype))

    @property
    def size(self) -> int:
        return self.logits.size

    def weights(self) -> np.ndarray:
        a = self.logits.data.astype(np.float64)
        e = np.exp(a - a.max())
        return e / e.sum()

    def __call__(self, x: np.ndarray) -> Tensor:
        """Mix (n, L+1, d) features into (n, d)."""
        lam = nc.softmax(self.logits.value).reshape(self.size, 1)
        xt = Tensor(np.swapaxes(x, 1, 2))  # (n, d, L+1)
        return (xt @ lam).reshape(x.shape[0], x.shape[2])


@dataclass(frozen=True)
class ProbeConfig:
    lr: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 30
    patience: int = 5
    semantic_dim: int = 64
    temperature: float = 0.1
    init_std: float = 0.02
    standardize: bool = True


class ProbeHead:
    """Mixer plus the task-specific trainable part."""

    def __init__(self, task: str, num_layers_plus_one: int, d: int, num_classes: int,
                 cfg: ProbeConfig, rng: RngStream, dtype=np.float32):
        self.task, self.cfg = task, cfg
        self.mixer = LayerMixer(num_layers_plus_one, dtype)
        d_in = 4 * d if task == "syntactic" else d
        d_out = cfg.semantic_dim if task == "semantic" else num_classes
        self.w = Parameter("probe.w", rng.truncated_normal((d_in, d_out), std=cfg.init_std, dtype=dtype))
        self.b = None if task == "semantic" else Parameter("probe.b", np.zeros(d_out, dtype=dtype))

    def parameters(self) -> list[Parameter]:
        return [p for p in (self.mixer.logits, self.w, self.b) if p is not None]

    def state(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.parameters()]

    def load(self, state: list[np.ndarray]) -> None:
        for p, s in zip(self.parameters(), state):
            p.value.data[...] = s

    def output(self, x: np.ndarray) -> Tensor:
        if self.task == "syntactic":
            u, v = self.mixer(x[:, 0]), self.mixer(x[:, 1])
            feats = nc.concat([u, v, u * v, nc.tabs(u - v)], axis=-1)
            return feats @ self.w.value + self.b.value
        h = self.mixer(x) @ self.w.value
        return h if self.b is None else h + self.b.value

    def loss(self, x: np.ndarray, y: np.ndarray) -> Tensor:
        out = self.output(x)
        if self.task == "semantic":
            return supcon_loss(out, y, self.cfg.temperature)
        return nc.cross_entropy(out, y)

    def predict(self, x: np.ndarray) -> np.ndarray:
        with nc.no_grad():
            return self.output(x).data.argmax(axis=-1)

    def embed(self, x: np.ndarray) -> np.ndarray:
        with nc.no_grad():
            return self.output(x).data


def supcon_loss(z: Tensor, labels: np.ndarray, temperature: float) -> Tensor:
    """Supervised contrastive loss; anchors without a positive in the batch are ignored."""
    labels = np.asarray(labels)
    n = len(labels)
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    anchors = same.any(axis=1)
    if not anchors.any():
        return nc.tsum(z * 0.0)
    zn = nc.l2_normalize(z)
    sims = (zn @ zn.T) * (1.0 / temperature)
    self_mask = np.where(np.eye(n, dtype=bool), -1e4, 0.0).astype(z.dtype)
    logp = nc.log_softmax(sims + self_mask, axis=1)
    weights = (same / np.maximum(same.sum(axis=1, keepdims=True), 1)).astype(z.dtype)
    per_anchor = nc.tsum(logp * weights, axis=1)
    return nc.tsum(per_anchor * (-anchors.astype(z.dtype) / anchors.sum()))


# -- metrics -------------------------------------------------------------------------

def eval_accuracy(predictions, labels) -> float:
    p, y = np.asarray(predictions), np.asarray(labels)
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {y.shape}")
    if p.size == 0:
        raise ValueError("accuracy of an empty set is undefined")
    return float((p == y).mean())


def average_precision(relevant_sorted: np.ndarray) -> float:
    """AP for a ranked boolean relevance list."""
    rel = np.asarray(relevant_sorted, dtype=bool)
    hits = np.flatnonzero(rel)
    if len(hits) == 0:
        return 0.0
    return float(np.mean(np.arange(1, len(hits) + 1) / (hits + 1)))


def eval_map(embeddings, labels) -> float:
    """Each item queries all others by cosine similarity (ties broken by index)."""
    x = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        raise ValueError("MAP needs at least two clusters")
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if (norms == 0).any():
        raise nc.DegenerateVectorError(f"zero-norm embedding at index {int(np.flatnonzero(norms == 0)[0])}")
    # snapped so that cosines equal up to round-off tie, and the index order then decides
    sims = np.round((x / norms) @ (x / norms).T, 12)
    aps, skipped = [], 0
    for i in range(len(labels)):
        others = np.delete(np.arange(len(labels)), i)
        rel = labels[others] == labels[i]
        if not rel.any():
            skipped += 1
            continue
        order = np.lexsort((others, -sims[i, others]))
        aps.append(average_precision(rel[order]))
    if skipped:
        warnings.warn(f"{skipped} singleton-cluster queries skipped", stacklevel=2)
    if not aps:
        raise ValueError("no query has a relevant item")
    return float(np.mean(aps))


# -- training ------------------------------------------------------------------------

@dataclass
class SeedResult:
    seed: int
    metric: float
    valid_metric: float
    best_epoch: int
    epochs_run: int
    lam: list[float]
    convergence_seconds: float


def _score(head: ProbeHead, split: FeatureSplit) -> float:
    if head.task == "semantic":
        return eval_map(head.embed(split.x), split.y)
    return eval_accuracy(head.predict(split.x), split.y)


def train_probe_seed(features: dict[str, FeatureSplit], task: str, num_classes: int,
                     cfg: ProbeConfig, seed: int) -> SeedResult:
    train = features["train"]
    if len(train) == 0:
        raise ValueError("empty training split")
    sample = train.x[0]
    L1, d = sample.shape[-2], sample.shape[-1]
    rng = RngStream(seed).child("probe", task)
    head = ProbeHead(task, L1, d, num_classes, cfg, rng.child("init"), dtype=train.x.dtype)
    opt = nc.Adam(head.parameters(), lr=cfg.lr)
    order_rng = rng.child("order").gen
    stop = EarlyStopper(cfg.patience)
    best_state, clock, conv = head.state(), Stopwatch(), 0.0
    epochs = 0
    for epoch in range(cfg.max_epochs):
        epochs += 1
        perm = order_rng.permutation(len(train))
        for s in range(0, len(perm), cfg.batch_size):
            idx = perm[s:s + cfg.batch_size]
            opt.zero_grad()
            loss = head.loss(train.x[idx], train.y[idx])
            loss.backward()
            opt.step()
        if stop.update(_score(head, features["valid"]), epoch):
            best_state, conv = head.state(), clock.elapsed()
        if stop.should_stop:
            break
    head.load(best_state)
    return SeedResult(seed, _score(head, features["test"]), float(stop.best), stop.best_epoch, epochs,
                      head.mixer.weights().tolist(), conv)


@dataclass
class ProbeReport:
    task: str
    source: str
    metric: float                # mean over seeds, in [0, 1]
    metric_name: str
    lam: list[float]             # seed-averaged mixer weights
    seeds: list[int]
    per_seed: list[SeedResult]
    config_hash: str = ""
    dataset_sizes: dict = field(default_factory=dict)
    notes: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        for s in d["per_seed"]:
            s["lambda"] = s.pop("lam")
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)


ARTIFACT_NOTES = {
    "syntactic_pair_encoding": "[u; v; u*v; |u-v|] of mean-pooled mixed code and AST-Only features",
    "semantic_loss": "supervised contrastive over cluster labels through a linear map",
    "structural_targets": f"{NUM_BUCKETS} buckets of cyclomatic complexity, last bucket >= {NUM_BUCKETS}",
    "pooling": "mean over non-pad positions including [CLS]/[SEP]",
}


def train_probe(params: EncoderParams, dataset: ProbeDataset, codec: Codec, source: str,
                cfg: ProbeConfig = ProbeConfig(), seeds: Sequence[int] = (0, 1, 2),
                config_hash: str = "", features: dict[str, FeatureSplit] | None = None) -> ProbeReport:
    """Train the mixer and head on frozen features, once per seed, and average."""
    before = params.checksum()
    if features is None:
        features = extract_features(dataset, params, codec)
    if cfg.standardize:
        features = standardize(features)
    results = [train_probe_seed(features, dataset.task, dataset.num_classes, cfg, s) for s in seeds]
    if params.checksum() != before:
        raise FrozenContractError("backbone parameters changed during probe training")
    lam = np.mean([r.lam for r in results], axis=0)
    return ProbeReport(
        task=dataset.task, source=source,
        metric=float(np.mean([r.metric for r in results])),
        metric_name="map" if dataset.task == "semantic" else "accuracy",
        lam=(lam / lam.sum()).tolist(), seeds=list(seeds), per_seed=results,
        config_hash=config_hash, dataset_sizes=dataset.sizes(), notes=dict(ARTIFACT_NOTES),
    )


def layer_contributions(report: ProbeReport) -> dict:
    lam = np.asarray(report.lam)
    ranking = [int(i) for i in np.argsort(-lam, kind="stable")]
    return {"task": report.task, "source": report.source, "lambda": lam.tolist(),
            "argmax": ranking[0], "ranking": ranking,
            "argmax_per_seed": [int(np.argmax(r.lam)) for r in report.per_seed]}


def dataset_hash(dataset: ProbeDataset) -> str:
    h = hashlib.sha256(dataset.task.encode())
    for name in SPLITS:
        for e in dataset.splits.get(name, []):
            h.update(json.dumps([name, e.inputs, e.label, e.position]).encode())
    return h.hexdigest()[:16]

"""Experiment configuration and the pipeline steps shared by the CLI, scripts and tests."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import __version__
from . import numcore as nc
from . import probes as pr
from .codeprops import ast_vocabulary
from .corpus import CorpusRecord, Vocabulary, build_vocab, generate_toy_corpus, read_jsonl
from .data import Codec
from .model import EncoderParams, ModelConfig, checkpoint_meta, init_params, load_checkpoint, save_checkpoint
from .numcore import RngStream
from .telly import CloneTask, CompletionTask, FinetuneConfig, SearchTask, Task
from .training import PretrainConfig, mlm_sequences, pretrain

OUTPUT_ENV = "TELLYLAB_OUT"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    # encoder shape
    num_layers: int = 4
    hidden_dim: int = 64
    ffn_dim: int = 256
    num_heads: int = 4
    max_positions: int = 128
    init_seed: int = 0
    # pretraining corpus (generated unless corpus_path names a JSONL file)
    corpus_seed: int = 0
    corpus_size: int = 2000
    corpus_path: str = ""
    min_count: int = 1
    # masked-LM pretraining
    pretrain_steps: int = 3000
    pretrain_lr: float = 1e-3
    pretrain_batch: int = 32
    pretrain_warmup: int = 100
    mask_prob: float = 0.15
    # probing
    probe_lr: float = 1e-3
    probe_epochs: int = 30
    probe_batch: int = 32
    probe_patience: int = 5
    probe_corpus_seed: int = 1
    probe_corpus_size: int = 1500
    lexical_snippets: int = 150
    semantic_problems: int = 50
    semantic_variants: int = 8
    # fine-tuning
    task: str = "search"
    finetune_lr: float = 5e-4
    finetune_epochs: int = 30
    finetune_batch: int = 32
    finetune_patience: int = 3
    train_limit: int = 0
    eval_limit: int = 0
    clone_problems: int = 40
    clone_variants: int = 6
    # run-wide
    seeds: tuple[int, ...] = (0, 1, 2)
    precision: int = 32
    rsa_n: int = 500
    rsa_seed: int = 0
    output: str = ""

    def __post_init__(self):
        if self.precision not in (32, 64):
            raise ConfigError("precision must be 32 or 64")
        if self.task not in ("search", "clone", "completion"):
            raise ConfigError(f"unknown task {self.task!r}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        for name in ("num_layers", "hidden_dim", "ffn_dim", "num_heads", "max_positions", "corpus_size",
                     "pretrain_batch", "probe_batch", "finetune_batch", "rsa_n"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.hidden_dim % self.num_heads:
            raise ConfigError("hidden_dim must be divisible by num_heads")

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def hashable(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("output")
        d["seeds"] = list(d["seeds"])
        return d

    @property
    def hash(self) -> str:
        blob = json.dumps(self.hashable(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def out_dir(self) -> Path:
        root = self.output or os.environ.get(OUTPUT_ENV) or "tellylab-out"
        return Path(root)

    def dumps(self) -> str:
        """key=value text that ``parse_config_text`` reads back."""
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name}={','.join(map(str, v)) if isinstance(v, tuple) else v}")
        return "\n".join(lines) + "\n"


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def _coerce(name: str, raw: str):
    default = _FIELDS[name].default
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.replace(" ", "").split(",") if x)
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc
    return raw


def parse_assignments(items: Iterable[str]) -> dict:
    out = {}
    for item in items:
        line = item.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected key=value, got {item!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        out[key] = _coerce(key, value)
    return out


def parse_config_text(text: str) -> dict:
    return parse_assignments(text.splitlines())


def load_config(path: str | Path | None = None, overrides: Sequence[str] = (), **flags) -> ExperimentConfig:
    """File values, then ``key=value`` overrides, then explicit flags (None flags are ignored)."""
    values = {}
    if path:
        values.update(parse_config_text(Path(path).read_text()))
    values.update(parse_assignments(overrides))
    values.update({k: v for k, v in flags.items() if v is not None})
    return ExperimentConfig(**values)


def provenance(cfg: ExperimentConfig) -> dict:
    return {"config_hash": cfg.hash, "seeds": list(cfg.seeds), "version": __version__}


# -- corpus, vocabulary, model -------------------------------------------------------------

def load_corpus(cfg: ExperimentConfig) -> list[CorpusRecord]:
    if cfg.corpus_path:
        res = read_jsonl(cfg.corpus_path)
        if not res.records:
            raise ConfigError(f"{cfg.corpus_path} contains no usable records")
        return res.records
    return generate_toy_corpus(cfg.corpus_seed, cfg.corpus_size)


def probe_corpus(cfg: ExperimentConfig) -> list[CorpusRecord]:
    """A separately seeded corpus, so probes do not score memorized pretraining text."""
    return generate_toy_corpus(cfg.probe_corpus_seed, cfg.probe_corpus_size)


def make_vocab(records: Sequence[CorpusRecord], cfg: ExperimentConfig) -> Vocabulary:
    return build_vocab([r.code for r in records] + [r.doc for r in records], cfg.min_count,
                       extra=ast_vocabulary())


def model_config(cfg: ExperimentConfig, vocab_size: int) -> ModelConfig:
    return ModelConfig(num_layers=cfg.num_layers, hidden_dim=cfg.hidden_dim, ffn_dim=cfg.ffn_dim,
                       num_heads=cfg.num_heads, vocab_size=vocab_size, max_positions=cfg.max_positions)


def pretrain_config(cfg: ExperimentConfig) -> PretrainConfig:
    return PretrainConfig(steps=cfg.pretrain_steps, batch_size=cfg.pretrain_batch, lr=cfg.pretrain_lr,
                          warmup=cfg.pretrain_warmup, mask_prob=cfg.mask_prob)


@dataclass
class Pretrained:
    params: EncoderParams
    vocab: Vocabulary
    losses: list[float]

    @property
    def codec(self) -> Codec:
        return Codec(self.vocab, self.params.config.max_positions)


def run_pretrain(cfg: ExperimentConfig, records: Sequence[CorpusRecord] | None = None,
                 on_step=None) -> Pretrained:
    records = load_corpus(cfg) if records is None else records
    vocab = make_vocab(records, cfg)
    params = init_params(model_config(cfg, len(vocab)), RngStream(cfg.init_seed).child("init"))
    codec = Codec(vocab, cfg.max_positions)
    seqs = mlm_sequences(records, codec)
    losses = pretrain(params, seqs, vocab.pad_id, vocab.mask_id, vocab.special_ids, pretrain_config(cfg),
                      RngStream(cfg.init_seed).child("pretrain"), on_step)
    return Pretrained(params, vocab, losses)


def random_init(params: EncoderParams, seed: int) -> EncoderParams:
    """A fresh, untrained encoder with the same shape (the random-representation baseline)."""
    return init_params(params.config, RngStream(seed).child("random-baseline"))


def save_model(path: str | Path, params: EncoderParams, vocab: Vocabulary, cfg: ExperimentConfig,
               **meta) -> str:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    return save_checkpoint(params, path, {"vocab": vocab.tokens, **provenance(cfg), **meta})


def load_model(path: str | Path) -> tuple[EncoderParams, Vocabulary, dict]:
    meta = checkpoint_meta(path)
    if "vocab" not in meta:
        raise ConfigError(f"{path}: checkpoint carries no vocabulary")
    return load_checkpoint(path), Vocabulary(meta["vocab"]), meta


# -- probing ---------------------------------------------------------------------------

def probe_config(cfg: ExperimentConfig) -> pr.ProbeConfig:
    return pr.ProbeConfig(lr=cfg.probe_lr, batch_size=cfg.probe_batch, max_epochs=cfg.probe_epochs,
                          patience=cfg.probe_patience)


def probe_datasets(cfg: ExperimentConfig, tasks: Sequence[str] = pr.TASKS) -> dict[str, pr.ProbeDataset]:
    recs = probe_corpus(cfg)
    rng = RngStream(cfg.probe_corpus_seed).child("probe-data")
    out = {}
    for t in tasks:
        if t == "lexical":
            out[t] = pr.build_lexical_dataset(recs[:cfg.lexical_snippets])
        elif t == "syntactic":
            out[t] = pr.build_syntactic_dataset(recs, rng.child("syntactic"))
        elif t == "structural":
            out[t] = pr.build_structural_dataset(recs)
        elif t == "semantic":
            out[t] = pr.build_semantic_dataset(cfg.semantic_problems, cfg.semantic_variants, rng.child("semantic"))
        else:
            raise ConfigError(f"unknown probe task {t!r}")
    return out


def merge_reports(reports: Sequence[pr.ProbeReport]) -> pr.ProbeReport:
    """Combine single-seed reports of one task and source into one seed-averaged report."""
    first = reports[0]
    per_seed = [r for rep in reports for r in rep.per_seed]
    lam = np.mean([r.lam for r in per_seed], axis=0)
    return dataclasses.replace(first, metric=float(np.mean([r.metric for r in per_seed])),
                               lam=(lam / lam.sum()).tolist(), seeds=[r.seed for r in per_seed],
                               per_seed=per_seed)


def probe_sources(cfg: ExperimentConfig, dataset: pr.ProbeDataset, codec: Codec,
                  models: dict[str, EncoderParams]) -> dict[str, pr.ProbeReport]:
    """Reports for a random-init baseline (a fresh encoder per seed) and each named model."""
    pcfg = probe_config(cfg)
    ref = next(iter(models.values()))
    out = {"random": merge_reports([
        pr.train_probe(random_init(ref, s), dataset, codec, "random", pcfg, (s,), cfg.hash) for s in cfg.seeds])}
    for name, params in models.items():
        out[name] = pr.train_probe(params, dataset, codec, name, pcfg, cfg.seeds, cfg.hash)
    return out


# -- fine-tuning -------------------------------------------------------------------------

def finetune_config(cfg: ExperimentConfig, **overrides) -> FinetuneConfig:
    base = FinetuneConfig(lr=cfg.finetune_lr, batch_size=cfg.finetune_batch, max_epochs=cfg.finetune_epochs,
                          patience=cfg.finetune_patience)
    return dataclasses.replace(base, **overrides)


def make_task(cfg: ExperimentConfig, kind: str, records: Sequence[CorpusRecord], codec: Codec) -> Task:
    limit = cfg.train_limit or None
    elimit = cfg.eval_limit or None
    if kind == "search":
        return SearchTask(records, codec, train_limit=limit, eval_limit=elimit)
    if kind == "clone":
        clusters = pr.semantic_clusters(cfg.clone_problems, cfg.clone_variants,
                                        RngStream(cfg.corpus_seed).child("clone-clusters"))
        return CloneTask(clusters, codec, RngStream(cfg.corpus_seed).child("clone-pairs"), train_limit=limit)
    if kind == "completion":
        return CompletionTask(records, codec, RngStream(cfg.corpus_seed).child("completion"),
                              train_limit=limit, eval_limit=elimit)
    raise ConfigError(f"unknown task {kind!r}")


def set_precision(cfg: ExperimentConfig) -> None:
    nc.set_precision(cfg.precision)

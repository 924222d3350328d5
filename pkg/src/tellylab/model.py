"""Transformer encoder: embeddings, post-LN encoder layers, masked-LM head.

Parameters are grouped by layer index: group 0 holds the token table, the
learned positional table and the embedding layer-norm; group ``l`` (1..L)
holds everything inside encoder layer ``l``. The LM head is tied to the token
table by default and only owns an output bias.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import numcore as nc
from .numcore import Parameter, RngStream, Tensor

MASK_NEG = -1e9


class ConfigError(ValueError):
    pass


class OverlengthError(ValueError):
    pass


class CorruptCheckpointError(ValueError):
    pass


class CheckpointMismatchError(ValueError):
    pass


class SkipBatch(Exception):
    """The batch has no position to train on; the caller should move on."""


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 4
    hidden_dim: int = 64
    ffn_dim: int = 256
    num_heads: int = 4
    vocab_size: int = 512
    max_positions: int = 128
    attention_mode: str = "bidirectional"
    dropout: float = 0.0
    tie_lm_head: bool = True
    ln_eps: float = 1e-5

    def __post_init__(self):
        for name in ("num_layers", "hidden_dim", "ffn_dim", "num_heads", "vocab_size", "max_positions"):
            if int(getattr(self, name)) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.hidden_dim % self.num_heads:
            raise ConfigError("hidden_dim must be divisible by num_heads")
        if self.attention_mode not in ("bidirectional", "causal"):
            raise ConfigError(f"unknown attention_mode {self.attention_mode!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")

    @classmethod
    def paper_scale(cls, **overrides) -> "ModelConfig":
        """12 layers, width 768. Used for parameter accounting only."""
        base = dict(num_layers=12, hidden_dim=768, ffn_dim=3072, num_heads=12,
                    vocab_size=51416, max_positions=1026)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        fields = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in fields})

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads


# -- parameter accounting -------------------------------------------------------

def embedding_group_count(cfg: ModelConfig) -> int:
    d = cfg.hidden_dim
    return cfg.vocab_size * d + cfg.max_positions * d + 2 * d


def layer_param_count(cfg: ModelConfig) -> int:
    d, f = cfg.hidden_dim, cfg.ffn_dim
    return 4 * (d * d + d) + (d * f + f) + (f * d + d) + 4 * d


def lm_head_count(cfg: ModelConfig) -> int:
    return cfg.vocab_size if cfg.tie_lm_head else cfg.vocab_size * cfg.hidden_dim + cfg.vocab_size


def param_count(cfg: ModelConfig, freeze_k: int | None = None, *,
                include_lm_head: bool = False, freeze_lm_head: bool = False) -> dict:
    """Closed-form parameter counts.

    ``freeze_k`` freezes groups 0..K. Without the LM head, K=0 leaves exactly
    the encoder stack trainable.
    """
    L = cfg.num_layers
    if freeze_k is not None and not 0 <= freeze_k <= L:
        raise ValueError(f"freeze_k must be in [0, {L}], got {freeze_k}")
    per_group = {0: embedding_group_count(cfg)}
    per_group.update({g: layer_param_count(cfg) for g in range(1, L + 1)})
    if include_lm_head:
        per_group["lm_head"] = lm_head_count(cfg)
    total = sum(per_group.values())
    frozen = 0
    if freeze_k is not None:
        frozen = sum(per_group[g] for g in range(freeze_k + 1))
    if include_lm_head and freeze_lm_head:
        frozen += per_group["lm_head"]
    return {"total": total, "trainable": total - frozen, "frozen": frozen,
            "per_layer": layer_param_count(cfg), "per_group": per_group}


# -- parameters -------------------------------------------------------------------

def group_of(name: str) -> int | str:
    head = name.split(".", 2)
    if head[0] == "embed":
        return 0
    if head[0] == "layer":
        return int(head[1])
    if head[0] == "lm_head":
        return "lm_head"
    raise KeyError(f"parameter {name!r} belongs to no group")


class EncoderParams:
    """Ordered, uniquely-named parameter set for one encoder."""

    def __init__(self, config: ModelConfig, params: Iterable[Parameter]):
        self.config = config
        self.params: dict[str, Parameter] = {}
        for p in params:
            if p.name in self.params:
                raise ValueError(f"duplicate parameter name {p.name!r}")
            self.params[p.name] = p

    def __getitem__(self, name: str) -> Parameter:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self.params.values())

    def __len__(self) -> int:
        return len(self.params)

    def t(self, name: str) -> Tensor:
        return self.params[name].value

    def group(self, g: int | str) -> list[Parameter]:
        return [p for p in self if group_of(p.name) == g]

    def trainable(self) -> list[Parameter]:
        return [p for p in self if p.trainable]

    def count(self, trainable_only: bool = False) -> int:
        return sum(p.size for p in self if p.trainable or not trainable_only)

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.config, [Parameter(p.name, p.data.copy(), p.trainable) for p in self])

    def astype(self, dtype) -> "EncoderParams":
        return EncoderParams(self.config, [Parameter(p.name, p.data.astype(dtype), p.trainable) for p in self])

    def checksum(self, names: Sequence[str] | None = None) -> str:
        chosen = self if names is None else [self.params[n] for n in names]
        return nc.checksum(chosen)

    def group_checksums(self) -> dict:
        groups = sorted({group_of(n) for n in self.params}, key=str)
        return {g: nc.checksum(self.group(g)) for g in groups}

    def untie_lm_head(self) -> None:
        """Give the LM head its own weight, initialised from the token table."""
        if "lm_head.w" in self.params:
            return
        self.params["lm_head.w"] = Parameter("lm_head.w", self.t("embed.tok").data.copy(), True)
        self.config = dataclasses.replace(self.config, tie_lm_head=False)


def _layer_shapes(cfg: ModelConfig, l: int) -> list[tuple[str, tuple[int, ...]]]:
    d, f = cfg.hidden_dim, cfg.ffn_dim
    p = f"layer.{l}."
    shapes = []
    for proj in ("q", "k", "v", "o"):
        shapes += [(p + f"attn.w{proj}", (d, d)), (p + f"attn.b{proj}", (d,))]
    shapes += [(p + "ln1.g", (d,)), (p + "ln1.b", (d,)),
               (p + "ffn.w1", (d, f)), (p + "ffn.b1", (f,)),
               (p + "ffn.w2", (f, d)), (p + "ffn.b2", (d,)),
               (p + "ln2.g", (d,)), (p + "ln2.b", (d,))]
    return shapes


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    d = cfg.hidden_dim
    shapes = [("embed.tok", (cfg.vocab_size, d)), ("embed.pos", (cfg.max_positions, d)),
              ("embed.ln.g", (d,)), ("embed.ln.b", (d,))]
    for l in range(1, cfg.num_layers + 1):
        shapes += _layer_shapes(cfg, l)
    if not cfg.tie_lm_head:
        shapes.append(("lm_head.w", (cfg.vocab_size, d)))
    shapes.append(("lm_head.bias", (cfg.vocab_size,)))
    return shapes


def init_params(config: ModelConfig, rng: RngStream, dtype=None) -> EncoderParams:
    """Truncated-normal(0.02) weights, zero biases, unit layer-norm gains."""
    dtype = dtype or nc.default_dtype()
    params = []
    for name, shape in param_shapes(config):
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            data = np.ones(shape, dtype=dtype)
        elif leaf.startswith("b") or leaf == "bias":
            data = np.zeros(shape, dtype=dtype)
        else:
            data = rng.child(name).truncated_normal(shape, std=0.02, dtype=dtype)
        params.append(Parameter(name, data, trainable=True))
    return EncoderParams(config, params)


# -- forward pass -------------------------------------------------------------------

@dataclass
class ActivationTrace:
    """Per-layer representations H^0..H^L of one sequence, each n×d."""

    h: list[np.ndarray]

    def __len__(self) -> int:
        return len(self.h)

    def __getitem__(self, l: int) -> np.ndarray:
        return self.h[l]


def _as_batch(tokens) -> tuple[np.ndarray, np.ndarray]:
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    return ids, np.ones(ids.shape, dtype=bool)


def embed_prenorm(tokens, params: EncoderParams) -> Tensor:
    """embed(t_i) + pos(i), before the embedding layer-norm."""
    cfg = params.config
    ids = np.asarray(tokens, dtype=np.int64)
    n = ids.shape[-1]
    if n > cfg.max_positions:
        raise OverlengthError(f"sequence length {n} exceeds max_positions {cfg.max_positions}")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise IndexError("token id outside the vocabulary")
    tok = nc.embedding(params.t("embed.tok"), ids)
    pos = nc.embedding(params.t("embed.pos"), np.arange(n))
    return tok + pos


def embed(tokens, params: EncoderParams) -> Tensor:
    """Token embedding plus learned position, then the embedding layer-norm."""
    w = embed_prenorm(tokens, params)
    return nc.layer_norm(w, params.t("embed.ln.g"), params.t("embed.ln.b"), params.config.ln_eps)


def attention_bias(pad_mask: np.ndarray, causal: bool, dtype) -> np.ndarray:
    """Additive (B,1,n,n) mask: 0 where attention is allowed, a large negative elsewhere."""
    b, n = pad_mask.shape
    allowed = np.broadcast_to(pad_mask[:, None, None, :], (b, 1, n, n))
    if causal:
        allowed = allowed & np.tril(np.ones((n, n), dtype=bool))[None, None]
    return np.where(allowed, 0.0, MASK_NEG).astype(dtype)


def encoder_layer(h: Tensor, params: EncoderParams, l: int, bias: np.ndarray,
                  rng: np.random.Generator | None = None) -> Tensor:
    """One post-LN encoder layer: h -> LN(h + MHA(h)) -> LN(. + FFN(.))."""
    cfg = params.config
    p = f"layer.{l}."
    t = params.t
    b, n, d = h.shape
    nh, hd = cfg.num_heads, cfg.head_dim

    def heads(x: Tensor) -> Tensor:
        return x.reshape(b, n, nh, hd).transpose(0, 2, 1, 3)

    q = heads(h @ t(p + "attn.wq") + t(p + "attn.bq"))
    k = heads(h @ t(p + "attn.wk") + t(p + "attn.bk"))
    v = heads(h @ t(p + "attn.wv") + t(p + "attn.bv"))
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(hd)) + bias
    ctx = nc.softmax(scores, axis=-1) @ v
    ctx = ctx.transpose(0, 2, 1, 3).reshape(b, n, d)
    attn = nc.dropout(ctx @ t(p + "attn.wo") + t(p + "attn.bo"), cfg.dropout, rng)
    h = nc.layer_norm(h + attn, t(p + "ln1.g"), t(p + "ln1.b"), cfg.ln_eps)
    ff = nc.gelu(h @ t(p + "ffn.w1") + t(p + "ffn.b1")) @ t(p + "ffn.w2") + t(p + "ffn.b2")
    ff = nc.dropout(ff, cfg.dropout, rng)
    return nc.layer_norm(h + ff, t(p + "ln2.g"), t(p + "ln2.b"), cfg.ln_eps)


def encode(ids: np.ndarray, pad_mask: np.ndarray | None, params: EncoderParams,
           causal: bool | None = None, rng: np.random.Generator | None = None,
           upto: int | None = None) -> list[Tensor]:
    """Batched forward returning [H^0, ..., H^L], each (B, n, d).

    ``upto`` stops after that layer. Dropout is active only when ``rng`` is given.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if pad_mask is None:
        pad_mask = np.ones(ids.shape, dtype=bool)
    if causal is None:
        causal = params.config.attention_mode == "causal"
    h = embed(ids, params)
    bias = attention_bias(pad_mask, causal, h.dtype)
    hs = [h]
    last = params.config.num_layers if upto is None else upto
    for l in range(1, last + 1):
        h = encoder_layer(h, params, l, bias, rng)
        hs.append(h)
    return hs


def forward(tokens: Sequence[int], params: EncoderParams, mask_mode: str | None = None) -> ActivationTrace:
    """All L+1 layer representations for one token sequence (no dropout)."""
    ids, mask = _as_batch(tokens)
    if ids.shape[1] == 0:
        d = params.config.hidden_dim
        return ActivationTrace([np.zeros((0, d), dtype=params.t("embed.tok").dtype)
                                for _ in range(params.config.num_layers + 1)])
    causal = None if mask_mode is None else mask_mode == "causal"
    hs = encode(ids, mask, params, causal=causal)
    return ActivationTrace([h.data[0] for h in hs])


def lm_logits(h: Tensor, params: EncoderParams) -> Tensor:
    w = params.t("lm_head.w") if "lm_head.w" in params else params.t("embed.tok")
    return h @ w.T + params.t("lm_head.bias")


def mask_positions(ids: np.ndarray, maskable: np.ndarray, mask_prob: float,
                   rng: RngStream | np.random.Generator) -> np.ndarray:
    """Boolean selection of positions to mask; at least one when any is maskable."""
    gen = rng.gen if isinstance(rng, RngStream) else rng
    if mask_prob <= 0.0 or not maskable.any():
        raise SkipBatch("no maskable positions in batch")
    chosen = (gen.random(ids.shape) < mask_prob) & maskable
    if not chosen.any():
        flat = np.flatnonzero(maskable)
        chosen.reshape(-1)[flat[gen.integers(len(flat))]] = True
    return chosen


def masked_lm_loss(batch: np.ndarray, pad_mask: np.ndarray, params: EncoderParams,
                   mask_prob: float, rng: RngStream | np.random.Generator, mask_id: int,
                   special_ids: Iterable[int] = ()) -> Tensor:
    """Cross-entropy over positions replaced by ``mask_id``.

    Raises ``SkipBatch`` when nothing can be masked (including mask_prob=0).
    """
    batch = np.asarray(batch, dtype=np.int64)
    if not 0 <= mask_id < params.config.vocab_size:
        raise ValueError("mask token id must be inside the vocabulary")
    maskable = pad_mask & ~np.isin(batch, list(special_ids) + [mask_id])
    chosen = mask_positions(batch, maskable, mask_prob, rng)
    inputs = np.where(chosen, mask_id, batch)
    gen = rng.gen if isinstance(rng, RngStream) else rng
    h = encode(inputs, pad_mask, params, causal=False, rng=gen if params.config.dropout else None)[-1]
    rows = np.nonzero(chosen)
    return nc.cross_entropy(lm_logits(h[rows], params), batch[rows])


def causal_lm_loss(batch: np.ndarray, pad_mask: np.ndarray, params: EncoderParams,
                   loss_mask: np.ndarray | None = None) -> Tensor:
    """Next-token cross-entropy in causal mode; ``loss_mask`` selects target positions."""
    batch = np.asarray(batch, dtype=np.int64)
    h = encode(batch, pad_mask, params, causal=True)[-1]
    targets_ok = pad_mask[:, 1:].copy()
    if loss_mask is not None:
        targets_ok &= loss_mask[:, 1:]
    rows = np.nonzero(targets_ok)
    if len(rows[0]) == 0:
        raise SkipBatch("no target positions")
    logits = lm_logits(h[:, :-1][rows], params)
    return nc.cross_entropy(logits, batch[:, 1:][rows])


# -- checkpoints -------------------------------------------------------------------

MAGIC = b"TLCKPT\x00\x01"
CKPT_VERSION = 1


def save_tensors(path: str | Path, params: Iterable[Parameter], header_extra: dict | None = None) -> str:
    """Write a JSON header followed by the raw little-endian payload; returns sha256 of the file."""
    entries, chunks, offset = [], [], 0
    bits = None
    for p in params:
        arr = np.ascontiguousarray(p.data)
        b = arr.dtype.itemsize * 8
        bits = b if bits is None else bits
        if b != bits:
            raise ValueError("all tensors in one checkpoint must share a precision")
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append({"name": p.name, "shape": list(arr.shape), "offset": offset,
                        "nbytes": len(raw), "trainable": p.trainable})
        chunks.append(raw)
        offset += len(raw)
    header = {"ckpt_version": CKPT_VERSION, "precision": bits or 32, "tensors": entries,
              "payload_bytes": offset}
    header.update(header_extra or {})
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = b"".join(chunks)
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(payload)
    return hashlib.sha256(MAGIC + blob + payload).hexdigest()


def load_tensors(path: str | Path) -> tuple[dict, list[Parameter]]:
    raw = Path(path).read_bytes()
    if raw[:len(MAGIC)] != MAGIC or len(raw) < len(MAGIC) + 8:
        raise CorruptCheckpointError(f"{path}: bad magic")
    (hlen,) = struct.unpack("<Q", raw[len(MAGIC):len(MAGIC) + 8])
    start = len(MAGIC) + 8
    try:
        header = json.loads(raw[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable header") from exc
    if header.get("ckpt_version") != CKPT_VERSION:
        raise CorruptCheckpointError(f"{path}: unsupported version {header.get('ckpt_version')}")
    payload = raw[start + hlen:]
    if len(payload) != header["payload_bytes"]:
        raise CorruptCheckpointError(
            f"{path}: payload has {len(payload)} bytes, header says {header['payload_bytes']}")
    dtype = np.dtype({32: "<f4", 64: "<f8"}[header["precision"]])
    params = []
    for e in header["tensors"]:
        chunk = payload[e["offset"]:e["offset"] + e["nbytes"]]
        if len(chunk) != e["nbytes"] or int(np.prod(e["shape"])) * dtype.itemsize != e["nbytes"]:
            raise CorruptCheckpointError(f"{path}: tensor {e['name']} has inconsistent extent")
        arr = np.frombuffer(chunk, dtype=dtype).reshape(e["shape"]).astype(dtype.newbyteorder("="))
        params.append(Parameter(e["name"], arr, e.get("trainable", True)))
    return header, params


def save_checkpoint(params: EncoderParams, path: str | Path, meta: dict | None = None) -> str:
    extra = {"config": params.config.to_dict(), "tied_lm_head": params.config.tie_lm_head}
    if meta:
        extra["meta"] = meta
    return save_tensors(path, params, extra)


def load_checkpoint(path: str | Path, expected: ModelConfig | None = None) -> EncoderParams:
    header, tensors = load_tensors(path)
    if "config" not in header:
        raise CorruptCheckpointError(f"{path}: header has no model config")
    config = ModelConfig.from_dict(header["config"])
    if expected is not None and expected != config:
        diff = {k: (v, getattr(config, k)) for k, v in expected.to_dict().items()
                if getattr(config, k) != v}
        raise CheckpointMismatchError(f"{path}: config differs from expected: {diff}")
    shapes = dict(param_shapes(config))
    names = [p.name for p in tensors]
    if set(names) != set(shapes):
        raise CheckpointMismatchError(f"{path}: parameter names do not match the config")
    for p in tensors:
        if tuple(p.shape) != shapes[p.name]:
            raise CheckpointMismatchError(f"{path}: {p.name} has shape {p.shape}, expected {shapes[p.name]}")
    return EncoderParams(config, tensors)


def checkpoint_meta(path: str | Path) -> dict:
    header, _ = load_tensors(path)
    return header.get("meta", {})

"""Shared helpers for the experiment scripts: load or train the pretrained encoder once per config."""

from __future__ import annotations

import json
import logging
from pathlib import Path

from tellylab import experiment as ex

log = logging.getLogger("scripts")


def pretrained_model(cfg: ex.ExperimentConfig, cache: Path):
    """Checkpoint keyed by the config hash, so a changed config never reuses a stale model."""
    path = cache / f"pretrained-{cfg.hash}.ckpt"
    if path.exists():
        params, vocab, _ = ex.load_model(path)
        return params, vocab
    log.info("pretraining %d steps -> %s", cfg.pretrain_steps, path)
    res = ex.run_pretrain(cfg, on_step=lambda s, l: s % 250 == 0 and log.info("step %d loss %.3f", s, l))
    ex.save_model(path, res.params, res.vocab, cfg, kind="pretrained")
    return res.params, res.vocab


def write_json(path: Path, doc: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str))
    print(f"wrote {path}")

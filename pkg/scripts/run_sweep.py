"""Base fine-tuning plus Telly-K for K = 0..L-1 on one task; writes sweep CSV and JSON.

    python3 scripts/run_sweep.py task=search train_limit=960 finetune_epochs=10
"""

from __future__ import annotations

import argparse
import logging
from pathlib import Path

from _common import pretrained_model, write_json

from tellylab import experiment as ex
from tellylab.telly import sweep, sweep_csv


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--ks", help="comma-separated K values (default 0..L-1)")
    ap.add_argument("overrides", nargs="*")
    args = ap.parse_args(argv)
    cfg = ex.load_config(args.config, args.overrides)
    params, vocab = pretrained_model(cfg, cfg.out_dir())
    codec = ex.Codec(vocab, params.config.max_positions)
    task = ex.make_task(cfg, cfg.task, ex.load_corpus(cfg), codec)
    ks = [int(k) for k in args.ks.split(",")] if args.ks else list(range(cfg.num_layers))
    reports, failures = sweep(task, params, ks, ex.finetune_config(cfg), cfg.seeds)
    text = sweep_csv(reports)
    path = Path(cfg.out_dir()) / "sweep" / f"sweep_{cfg.task}.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    print(text, end="")
    write_json(path.with_suffix(".json"), {"runs": [r.to_json() for r in reports], "failures": failures,
                                           "provenance": ex.provenance(cfg)})


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    main()

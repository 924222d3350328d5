"""Layer-wise RSA between the pretrained encoder and its fine-tuned copies (base and Telly-K).

    python3 scripts/run_rsa.py --ks 1,2 rsa_n=200 task=search
"""

from __future__ import annotations

import argparse
import logging

from _common import pretrained_model, write_json

from tellylab import experiment as ex
from tellylab.rsa import rsa_compare, sample_snippets
from tellylab.telly import finetune


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--ks", default="", help="Telly-K values to compare besides the base run")
    ap.add_argument("overrides", nargs="*")
    args = ap.parse_args(argv)
    cfg = ex.load_config(args.config, args.overrides)
    params, vocab = pretrained_model(cfg, cfg.out_dir())
    codec = ex.Codec(vocab, params.config.max_positions)
    records = ex.load_corpus(cfg)
    task = ex.make_task(cfg, cfg.task, records, codec)
    sample, digest = sample_snippets(records, min(cfg.rsa_n, len(records)), cfg.rsa_seed)
    seqs = [codec.code(r.code) for r in sample]
    seed = cfg.seeds[0]
    out = {}
    for k in [None] + [int(k) for k in args.ks.split(",") if k]:
        tuned = finetune(task, params, k, ex.finetune_config(cfg), (seed,), keep_models=True).models[seed]
        rep = rsa_compare(params, tuned, seqs, vocab.pad_id, ("pretrained", f"{cfg.task}-K{k}"), digest,
                          cfg.rsa_seed)
        rep.config_hash = cfg.hash
        out["base" if k is None else f"telly-{k}"] = rep.to_json()
        print(f"{'base' if k is None else f'telly-{k}':>8}: " + " ".join(f"{r:.4f}" for r in rep.rho))
    write_json(cfg.out_dir() / "rsa" / f"rsa_{cfg.task}.json", {"runs": out, "provenance": ex.provenance(cfg)})


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    main()

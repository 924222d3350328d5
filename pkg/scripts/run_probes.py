"""Probe a pretrained encoder and a random-init baseline on all four probing tasks.

    python3 scripts/run_probes.py [--config FILE] [key=value ...]
"""

from __future__ import annotations

import argparse
import logging
import time

from _common import pretrained_model, write_json

from tellylab import experiment as ex
from tellylab import probes as pr


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("overrides", nargs="*")
    args = ap.parse_args(argv)
    cfg = ex.load_config(args.config, args.overrides)
    out = cfg.out_dir() / "probes"
    params, vocab = pretrained_model(cfg, cfg.out_dir())
    codec = ex.Codec(vocab, params.config.max_positions)
    rows = []
    for task, ds in ex.probe_datasets(cfg).items():
        t0 = time.perf_counter()
        reports = ex.probe_sources(cfg, ds, codec, {"pretrained": params})
        gap = 100 * (reports["pretrained"].metric - reports["random"].metric)
        rows.append({"task": task, "random": 100 * reports["random"].metric,
                     "pretrained": 100 * reports["pretrained"].metric, "gap": gap,
                     "argmax_layer": pr.layer_contributions(reports["pretrained"])["argmax"],
                     "seconds": time.perf_counter() - t0})
        for src, rep in reports.items():
            write_json(out / f"{task}_{src}.json", rep.to_json())
    print(f"{'task':<11}{'random':>8}{'pretrained':>12}{'gap':>8}  argmax")
    for r in rows:
        print(f"{r['task']:<11}{r['random']:>8.2f}{r['pretrained']:>12.2f}{r['gap']:>8.2f}  {r['argmax_layer']}")
    write_json(out / "summary.json", {"probes": rows, "provenance": ex.provenance(cfg)})


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    main()

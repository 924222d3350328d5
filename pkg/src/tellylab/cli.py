"""Command-line entry point: ``tellylab <command> [options] [key=value ...]``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

from . import __version__
from . import experiment as ex
from . import probes as pr
from .codeprops import analyze
from .model import ModelConfig, param_count
from .rsa import rsa_compare, sample_snippets
from .telly import FrozenDriftError, finetune, head_param_count, sweep, sweep_csv
from .training import smooth

log = logging.getLogger("tellylab")


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def _dump(obj: dict, cfg: ex.ExperimentConfig) -> str:
    return json.dumps({**obj, "provenance": ex.provenance(cfg)}, indent=2, sort_keys=True, default=str)


def _config(args) -> ex.ExperimentConfig:
    flags = {"precision": args.precision, "rsa_n": getattr(args, "rsa_n", None), "output": args.out}
    if args.seed is not None:
        flags["seeds"] = (args.seed,)
        flags["init_seed"] = args.seed
    cfg = ex.load_config(args.config, args.overrides, **flags)
    ex.set_precision(cfg)
    return cfg


# -- commands ----------------------------------------------------------------------------------

def cmd_params(args, cfg: ex.ExperimentConfig) -> int:
    """Closed-form parameter accounting for every K (or one K with --freeze)."""
    if args.paper_scale:
        mc = ModelConfig.paper_scale()
    else:
        mc = ModelConfig(num_layers=cfg.num_layers, hidden_dim=cfg.hidden_dim, ffn_dim=cfg.ffn_dim,
                         num_heads=cfg.num_heads, vocab_size=args.vocab_size, max_positions=cfg.max_positions)
    ks = [args.freeze] if args.freeze is not None else [None, *range(mc.num_layers + 1)]
    base = param_count(mc, None)
    rows = []
    for k in ks:
        c = param_count(mc, k)
        rows.append({"K": "base" if k is None else k, "trainable": c["trainable"], "frozen": c["frozen"],
                     "reduction_pct": 100.0 * (1 - c["trainable"] / base["trainable"])})
    doc = {"model": mc.to_dict(), "per_layer": base["per_layer"], "embedding": base["per_group"][0],
           "total": base["total"], "rows": rows}
    lines = [f"per-layer parameters: {base['per_layer']:,}", f"embedding group: {base['per_group'][0]:,}",
             f"{'K':>6} {'trainable':>14} {'frozen':>14} {'reduction':>10}"]
    for r in rows:
        lines.append(f"{r['K']!s:>6} {r['trainable']:>14,} {r['frozen']:>14,} {r['reduction_pct']:>9.2f}%")
    print("\n".join(lines))
    if args.json:
        print(_dump(doc, cfg))
    if not args.no_write:
        _write(cfg.out_dir() / "params.json", _dump(doc, cfg))
    return 0


def cmd_pretrain(args, cfg) -> int:
    out = cfg.out_dir()

    def progress(step, loss):
        if step % 100 == 0:
            log.info("step %d loss %.4f", step, loss)

    res = ex.run_pretrain(cfg, on_step=progress)
    ckpt = out / "pretrained.ckpt"
    digest = ex.save_model(ckpt, res.params, res.vocab, cfg, kind="pretrained")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "loss"])
    for i, l in enumerate(res.losses):
        w.writerow([i, repr(l)])
    _write(out / "pretrain_loss.csv", buf.getvalue())
    sm = smooth(res.losses, 50)
    summary = {"checkpoint": str(ckpt), "sha256": digest, "steps": len(res.losses),
               "first_window_loss": float(sm[0]) if len(sm) else None,
               "last_window_loss": float(sm[-1]) if len(sm) else None}
    _write(out / "pretrain.json", _dump(summary, cfg))
    print(json.dumps(summary, indent=2))
    return 0


def cmd_probe(args, cfg) -> int:
    params, vocab, _ = ex.load_model(args.checkpoint)
    models = {"pretrained": params}
    if args.finetuned:
        models["finetuned"] = ex.load_model(args.finetuned)[0]
    codec = ex.Codec(vocab, params.config.max_positions)
    tasks = pr.TASKS if args.task == "all" else (args.task,)
    datasets = ex.probe_datasets(cfg, tasks)
    out, summary = cfg.out_dir() / "probes", []
    for task, ds in datasets.items():
        reports = ex.probe_sources(cfg, ds, codec, models)
        for source, rep in reports.items():
            _write(out / f"{task}_{source}.json", _dump(rep.to_json(), cfg))
        gap = 100 * (reports["pretrained"].metric - reports["random"].metric)
        line = {"task": task, **{s: round(100 * r.metric, 2) for s, r in reports.items()},
                "gap": round(gap, 2), "directional": "PASS" if gap > 0 else "FAIL",
                "argmax_layer": {s: pr.layer_contributions(r)["argmax"] for s, r in reports.items()}}
        summary.append(line)
        print(json.dumps(line))
    _write(out / "summary.json", _dump({"probes": summary}, cfg))
    return 0


def cmd_rsa(args, cfg) -> int:
    a, vocab, _ = ex.load_model(args.ckpt_a)
    b, vocab_b, _ = ex.load_model(args.ckpt_b)
    if vocab != vocab_b:
        raise SystemExit("the two checkpoints use different vocabularies")
    codec = ex.Codec(vocab, a.config.max_positions)
    records = ex.load_corpus(cfg)
    n = min(cfg.rsa_n, len(records))
    sample, digest = sample_snippets(records, n, cfg.rsa_seed)
    rep = rsa_compare(a, b, [codec.code(r.code) for r in sample], vocab.pad_id,
                      (Path(args.ckpt_a).name, Path(args.ckpt_b).name), digest, cfg.rsa_seed)
    rep.config_hash = cfg.hash
    out = cfg.out_dir() / "rsa"
    _write(out / "rsa.json", _dump(rep.to_json(), cfg))
    _write(out / "rsa.csv", rep.to_csv())
    print(rep.to_csv(), end="")
    return 0


def _task_and_model(args, cfg):
    params, vocab, _ = ex.load_model(args.checkpoint)
    codec = ex.Codec(vocab, params.config.max_positions)
    task = ex.make_task(cfg, cfg.task, ex.load_corpus(cfg), codec)
    return params, vocab, task


def cmd_finetune(args, cfg) -> int:
    params, vocab, task = _task_and_model(args, cfg)
    fcfg = ex.finetune_config(cfg)
    try:
        res = finetune(task, params, args.freeze, fcfg, cfg.seeds, keep_models=True)
    except FrozenDriftError as exc:
        print(f"invariant violated: {exc}", file=sys.stderr)
        return 3
    rep = res.report
    out = cfg.out_dir() / "finetune"
    _write(out / f"runreport_{cfg.task}_{rep.label}.json", _dump(rep.to_json(), cfg))
    first = cfg.seeds[0]
    ex.save_model(out / f"{cfg.task}_{rep.label}.ckpt", res.models[first], vocab, cfg,
                  kind="finetuned", task=cfg.task, K=args.freeze, seed=first)
    print(json.dumps({"K": rep.k, "trainable": rep.params_trainable, "metrics": rep.metrics,
                      "epoch_seconds": rep.epoch_seconds}, indent=2))
    return 0


def cmd_sweep(args, cfg) -> int:
    params, _, task = _task_and_model(args, cfg)
    L = params.config.num_layers
    ks = list(range(L)) if args.ks is None else [int(k) for k in args.ks.split(",")]
    reports, failures = sweep(task, params, ks, ex.finetune_config(cfg), cfg.seeds)
    out = cfg.out_dir() / "sweep"
    _write(out / f"sweep_{cfg.task}.csv", sweep_csv(reports))
    _write(out / f"sweep_{cfg.task}.json",
           _dump({"runs": [r.to_json() for r in reports], "failures": failures,
                  "head_params": head_param_count(task, params.config)}, cfg))
    print(sweep_csv(reports), end="")
    drift = [f for f in failures if f["error"].startswith("FrozenDriftError")]
    return 3 if drift else (1 if failures else 0)


def cmd_analyze(args, cfg) -> int:
    src = Path(args.file).read_text() if args.file != "-" else sys.stdin.read()
    print(json.dumps(analyze(src), indent=2))
    return 0


def cmd_report(args, cfg) -> int:
    """Collect every JSON report under the output directory into one summary."""
    root = Path(args.dir) if args.dir else cfg.out_dir()
    found = {}
    for path in sorted(root.rglob("*.json")):
        if path.name == "report.json":
            continue
        try:
            found[str(path.relative_to(root))] = json.loads(path.read_text())
        except json.JSONDecodeError:
            log.warning("skipping unreadable %s", path)
    lines = [f"# tellylab report ({len(found)} files)"]
    for name, doc in found.items():
        if "probes" in doc:
            for p in doc["probes"]:
                lines.append(f"probe {p['task']}: random {p['random']} pretrained {p['pretrained']} "
                             f"gap {p['gap']} {p['directional']}")
        elif "layers" in doc:
            rhos = " ".join(f"{x['rho']:.3f}" for x in doc["layers"])
            lines.append(f"rsa {doc['modelA']} vs {doc['modelB']}: {rhos}")
        elif "runs" in doc:
            for r in doc["runs"]:
                lines.append(f"sweep {r['task']} {r['label']}: trainable {r['params_trainable']} "
                             f"metrics {json.dumps(r['metrics'])}")
    text = "\n".join(lines) + "\n"
    _write(root / "report.md", text)
    _write(root / "report.json", json.dumps({"files": sorted(found)}, indent=2))
    print(text, end="")
    return 0


COMMANDS = {"params": cmd_params, "pretrain": cmd_pretrain, "probe": cmd_probe, "rsa": cmd_rsa,
            "finetune": cmd_finetune, "sweep": cmd_sweep, "analyze": cmd_analyze, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--seed", type=int, help="single seed (replaces the seed list and the init seed)")
    common.add_argument("--precision", type=int, choices=(32, 64))
    common.add_argument("--out", help=f"output directory (default ${ex.OUTPUT_ENV} or ./tellylab-out)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="tellylab", description="Layer probing, RSA and Telly-K fine-tuning lab.",
                                epilog="Any trailing key=value arguments override config fields.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("params", parents=[common], help="parameter accounting per K")
    s.add_argument("--freeze", type=int)
    s.add_argument("--paper-scale", action="store_true", help="12 layers, width 768, FFN 3072")
    s.add_argument("--vocab-size", type=int, default=512)
    s.add_argument("--json", action="store_true")
    s.add_argument("--no-write", action="store_true")

    sub.add_parser("pretrain", parents=[common], help="masked-LM pretraining")

    s = sub.add_parser("probe", parents=[common], help="probing tasks vs a random-init baseline")
    s.add_argument("checkpoint")
    s.add_argument("--finetuned")
    s.add_argument("--task", default="all", choices=("all",) + pr.TASKS)

    s = sub.add_parser("rsa", parents=[common], help="layer-wise RSA between two checkpoints")
    s.add_argument("ckpt_a")
    s.add_argument("ckpt_b")
    s.add_argument("--rsa-n", type=int)

    s = sub.add_parser("finetune", parents=[common], help="one Telly-K (or base) fine-tuning run")
    s.add_argument("checkpoint")
    s.add_argument("--freeze", type=int, help="K; omit for full fine-tuning")

    s = sub.add_parser("sweep", parents=[common], help="base run plus Telly-K for each K")
    s.add_argument("checkpoint")
    s.add_argument("--freeze", dest="ks", help="comma-separated K values (default 0..L-1)")

    s = sub.add_parser("analyze", parents=[common], help="lexical classes, AST-Only and complexity of a file")
    s.add_argument("file")

    s = sub.add_parser("report", parents=[common], help="summarize reports in an output directory")
    s.add_argument("--dir", help="directory to scan (default: the output directory)")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    bad = [a for a in extra if "=" not in a or a.startswith("-")]
    if bad:
        parser.error(f"unrecognized arguments: {' '.join(bad)}")
    args.overrides = extra
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = _config(args)
    except ex.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    return COMMANDS[args.command](args, cfg)


if __name__ == "__main__":
    sys.exit(main())

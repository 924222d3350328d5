import csv
import io
import json

import pytest

from tellylab import cli
from tellylab import experiment as ex
from tellylab import telly

TINY = ["num_layers=2", "hidden_dim=16", "ffn_dim=32", "num_heads=2", "corpus_size=120", "pretrain_steps=120",
        "pretrain_warmup=5", "pretrain_lr=3e-3", "seeds=0", "train_limit=48", "eval_limit=24",
        "finetune_epochs=2", "probe_epochs=2", "probe_corpus_size=200", "lexical_snippets=40",
        "semantic_problems=12", "semantic_variants=4", "clone_problems=10", "clone_variants=3"]


# -- configuration ---------------------------------------------------------------------

def test_precedence_file_then_overrides_then_flags(tmp_path):
    f = tmp_path / "run.cfg"
    f.write_text("# comment\nnum_layers = 3\nprobe_lr=0.5\nseeds=4,5\n")
    cfg = ex.load_config(f, ["probe_lr=0.25"], seeds=(9,), precision=None)
    assert cfg.num_layers == 3 and cfg.probe_lr == 0.25 and cfg.seeds == (9,)
    assert cfg.precision == 32


def test_config_errors():
    with pytest.raises(ex.ConfigError):
        ex.parse_assignments(["no_such_key=1"])
    with pytest.raises(ex.ConfigError):
        ex.parse_assignments(["num_layers"])
    with pytest.raises(ex.ConfigError):
        ex.load_config(None, ["precision=16"])
    with pytest.raises(ex.ConfigError):
        ex.load_config(None, ["hidden_dim=10", "num_heads=4"])


def test_hash_ignores_output_and_roundtrips():
    a = ex.ExperimentConfig()
    assert a.hash == a.replace(output="/elsewhere").hash
    assert a.hash != a.replace(seeds=(0,)).hash
    assert ex.ExperimentConfig(**ex.parse_config_text(a.dumps())) == a


def test_output_dir_from_environment(monkeypatch, tmp_path):
    monkeypatch.setenv(ex.OUTPUT_ENV, str(tmp_path))
    assert ex.ExperimentConfig().out_dir() == tmp_path
    assert ex.ExperimentConfig(output="x").out_dir().name == "x"


# -- commands ---------------------------------------------------------------------------

def test_params_paper_scale(tmp_path, capsys):
    assert cli.main(["params", "--paper-scale", "--out", str(tmp_path)]) == 0
    text = capsys.readouterr().out
    assert "7,087,872" in text and "85,054,464" in text
    doc = json.loads((tmp_path / "params.json").read_text())
    assert doc["per_layer"] == 7_087_872
    rows = {r["K"]: r for r in doc["rows"]}
    assert rows[0]["trainable"] == 85_054_464
    for k in range(1, 13):
        assert rows[k - 1]["trainable"] - rows[k]["trainable"] == 7_087_872
    for r in doc["rows"]:
        assert f"{r['trainable']:,}" in text
    assert doc["provenance"]["config_hash"]


def test_bad_arguments_exit_nonzero(tmp_path, capsys):
    assert cli.main(["params", "--out", str(tmp_path), "num_layers=x"]) == 2
    with pytest.raises(SystemExit) as exc:
        cli.main(["params", "--bogus"])
    assert exc.value.code == 2


def test_analyze(tmp_path, capsys):
    f = tmp_path / "a.py"
    f.write_text("def f(x):\n    if x:\n        return 1\n    return 2\n")
    assert cli.main(["analyze", str(f), "--out", str(tmp_path)]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["functions"][0]["M"] == 2


@pytest.fixture(scope="module")
def pretrained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert cli.main(["pretrain", "--out", str(out), *TINY]) == 0
    return out


def test_pretrain_is_reproducible(pretrained, tmp_path):
    assert cli.main(["pretrain", "--out", str(tmp_path), *TINY]) == 0
    first = json.loads((pretrained / "pretrain.json").read_text())
    again = json.loads((tmp_path / "pretrain.json").read_text())
    assert first["sha256"] == again["sha256"]
    assert first["last_window_loss"] < first["first_window_loss"]
    losses = [float(r["loss"]) for r in csv.DictReader(io.StringIO((pretrained / "pretrain_loss.csv").read_text()))]
    assert len(losses) == 120


def test_finetune_rsa_probe_report(pretrained, capsys):
    ckpt = str(pretrained / "pretrained.ckpt")
    out = ["--out", str(pretrained)]
    assert cli.main(["finetune", ckpt, "--freeze", "1", *out, *TINY]) == 0
    rep = json.loads((pretrained / "finetune" / "runreport_search_telly-1.json").read_text())
    assert rep["frozen_groups_verified"] == [0, 1]
    tuned = str(pretrained / "finetune" / "search_telly-1.ckpt")

    assert cli.main(["rsa", ckpt, tuned, "--rsa-n", "30", *out, *TINY]) == 0
    doc = json.loads((pretrained / "rsa" / "rsa.json").read_text())
    assert doc["N"] == 30
    assert [x["rho"] for x in doc["layers"]][:2] == [1.0, 1.0]

    assert cli.main(["probe", ckpt, "--task", "structural", *out, *TINY]) == 0
    summary = json.loads((pretrained / "probes" / "summary.json").read_text())
    assert summary["probes"][0]["directional"] in ("PASS", "FAIL")
    assert (pretrained / "probes" / "structural_random.json").exists()

    capsys.readouterr()
    assert cli.main(["report", *out, *TINY]) == 0
    text = capsys.readouterr().out
    assert "probe structural" in text and "rsa " in text


def test_sweep_csv_and_drift_exit(pretrained, monkeypatch):
    ckpt = str(pretrained / "pretrained.ckpt")
    out = ["--out", str(pretrained)]
    assert cli.main(["sweep", ckpt, *out, *TINY, "task=clone"]) == 0
    rows = list(csv.DictReader(io.StringIO((pretrained / "sweep" / "sweep_clone.csv").read_text())))
    assert [r["K"] for r in rows] == ["base", "0", "1"]

    def drift(*a, **k):
        raise telly.FrozenDriftError("frozen groups [0] changed")

    monkeypatch.setattr(cli, "finetune", drift)
    assert cli.main(["finetune", ckpt, "--freeze", "0", *out, *TINY]) == 3

import csv
import json

import numpy as np
import pytest

from fedprior.cli import EXIT_CONFIG, EXIT_IO, main
from fedprior.config import SEED_ENV
from fedprior.persistence import load_paramset
from fedprior.recon import ReconSet, check_recon_set

TINY = """
seed = 3

[sites]
n_sites = 3
image_size = 32
n_train = 6
n_val = 1
n_test = 3

[codec]
width = 8
steps = 3
batch_size = 4
n_aux = 8

[prior]
d_model = 16
n_layers = 1
n_heads = 2

[federation]
rounds = 1
batch_size = 4

[recon]
pretrain_epochs = 1
finetune_epochs = 1
batch_size = 4
width = 4
depth = 2
n_synth = 2

[recon.site_0]
arch = "cascade-2"

[recon.site_1]
arch = "conv-autoencoder"

[recon.site_2]
arch = "unrolled-3"

[eval]
R = [4.0, 8.0]
"""


@pytest.fixture(autouse=True)
def _no_seed_env(monkeypatch):
    monkeypatch.delenv(SEED_ENV, raising=False)


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    """A full tiny pipeline: gen-data, train-prior, train-recon for every site."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.toml"
    cfg.write_text(TINY, encoding="utf-8")
    c = str(cfg)
    assert main(["gen-data", "--config", c, "--out", str(root / "data")]) == 0
    assert main(["train-prior", "--config", c, "--data", str(root / "data"), "--out", str(root / "prior"),
                 "--pretrain-codec"]) == 0
    for k in range(3):
        assert main(["train-recon", "--config", c, "--site", str(k), "--prior", str(root / "prior" / "prior.ckpt"),
                     "--data", str(root / "data"), "--out", str(root / "recon")]) == 0
    return root, c


def test_gen_data_default_layout_and_rerun_identical(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path / "a")]) == 0
    assert main(["gen-data", "--out", str(tmp_path / "b")]) == 0
    for k in range(3):
        files = sorted((tmp_path / "a" / f"site_{k}").rglob("*.fvt"))
        assert len(files) == 176
    a = {p.relative_to(tmp_path / "a"): p.read_bytes() for p in (tmp_path / "a").rglob("*") if p.is_file()}
    b = {p.relative_to(tmp_path / "b"): p.read_bytes() for p in (tmp_path / "b").rglob("*") if p.is_file()}
    assert a == b


def test_missing_section_exit_code_names_section(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text(TINY.replace("[eval]\nR = [4.0, 8.0]\n", ""), encoding="utf-8")
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "d")]) == EXIT_CONFIG
    assert "[eval]" in capsys.readouterr().err


def test_train_prior_rejects_zero_rounds(run, tmp_path, capsys):
    root, c = run
    code = main(["train-prior", "--config", c, "--data", str(root / "data"), "--out", str(tmp_path),
                 "--codec", str(root / "prior" / "codec.fps"), "--rounds", "0"])
    assert code == EXIT_CONFIG and "rounds" in capsys.readouterr().err


def test_missing_data_is_io_error(tmp_path):
    code = main(["train-recon", "--site", "0", "--skip-finetune", "--data", str(tmp_path / "none"),
                 "--out", str(tmp_path / "o")])
    assert code == EXIT_IO


def test_train_prior_outputs(run):
    root, _ = run
    summary = json.loads((root / "prior" / "summary.json").read_text())
    assert summary["rounds"] == 1 and len(summary["checksums"]) == 1
    manifest = json.loads((root / "prior" / "manifest.json").read_text())
    assert {"prior.ckpt", "codec.fps", "rounds.csv"} <= set(manifest["files"])
    assert manifest["seeds"]["master"] == 3


def test_synth_writes_n_consistent_triples(run, tmp_path):
    root, c = run
    out = tmp_path / "syn"
    assert main(["synth", "--config", c, "--prior", str(root / "prior" / "prior.ckpt"), "--site", "1",
                 "--n", "3", "--ops-from", "0", "--out", str(out)]) == 0
    triples = sorted(out.glob("triple_*.fps"))
    assert len(triples) == 3
    lines = (out / "generation.jsonl").read_text().splitlines()
    assert [json.loads(x)["index"] for x in lines] == [0, 1, 2]
    t = [load_paramset(p) for p in triples]
    data = ReconSet(np.stack([d["x_ref"] for d in t]), np.stack([d["y"] for d in t]),
                    np.stack([d["x_us"] for d in t]), np.stack([d["mask"] for d in t]),
                    np.stack([d["coils"] for d in t]), np.ones(3, int))
    assert check_recon_set(data)
    again = tmp_path / "syn2"
    main(["synth", "--config", c, "--prior", str(root / "prior" / "prior.ckpt"), "--site", "1",
          "--n", "3", "--ops-from", "0", "--out", str(again)])
    assert all(p.read_bytes() == (again / p.name).read_bytes() for p in triples)


def test_synth_rejects_bad_site(run, tmp_path):
    root, c = run
    assert main(["synth", "--config", c, "--prior", str(root / "prior" / "prior.ckpt"), "--site", "5",
                 "--n", "1", "--ops-from", "0", "--out", str(tmp_path)]) == EXIT_CONFIG


def test_evaluate_grid_and_report(run, tmp_path):
    root, c = run
    out = tmp_path / "eval"
    assert main(["evaluate", "--config", c, "--models", str(root / "recon"), "--data", str(root / "data"),
                 "--out", str(out)]) == 0
    with open(out / "metrics.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 18
    assert {(r["site"], r["target_site"]) for r in rows} == {(str(a), str(b)) for a in range(3) for b in range(3)}
    report = json.loads((out / "report.json").read_text())
    assert len(report["config_hash"]) == 64 and report["seeds"]["master"] == 3
    assert report["max_dc_error"] < 1e-8


def test_seed_env_changes_outputs(tmp_path, monkeypatch):
    cfg = tmp_path / "t.toml"
    cfg.write_text(TINY, encoding="utf-8")
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    monkeypatch.setenv(SEED_ENV, "11")
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
    ma = json.loads((tmp_path / "a" / "manifest.json").read_text())
    mb = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert mb["seeds"]["master"] == 11 and ma["config_hash"] != mb["config_hash"]
    assert ma["files"] != mb["files"]

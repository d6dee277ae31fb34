import csv
import hashlib
import json

import pytest

from pnoma import cli
from pnoma.numcore import NumericError


def write_config(path, **overrides):
    doc = {"system": {"n": 1, "rho_bar": "1/6"}, "train": {"max_epochs": 2},
           "data": {"source": "synthetic", "train_count": 16, "val_count": 16, "test_count": 16},
           "seed": 5, "out": str(path.parent / "run")}
    doc.update(overrides)
    path.write_text(json.dumps(doc))
    return path


def digest(directory):
    h = hashlib.sha256()
    for f in sorted(directory.rglob("*")):
        if f.is_file():
            h.update(f.name.encode())
            h.update(f.read_bytes())
    return h.hexdigest()


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root / "c.json")
    assert cli.main(["train", "--config", str(cfg), "--out", str(root / "a")]) == 0
    return root, cfg


def test_train_outputs_and_determinism(trained_run):
    root, cfg = trained_run
    assert (root / "a" / "n1" / "manifest.json").exists()
    hist = read_csv(root / "a" / "history.csv")
    assert hist[0] == ["epoch", "train_loss", "val_psnr"] and len(hist) == 3
    assert cli.main(["train", "--config", str(cfg), "--out", str(root / "b")]) == 0
    assert digest(root / "a" / "n1") == digest(root / "b" / "n1")


def test_non_integer_m_rejected(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", system={"rho_bar": "1/7"})
    assert cli.main(["train", "--config", str(cfg)]) == 1
    assert "not a positive integer" in capsys.readouterr().err


def test_unknown_key_rejected(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", learning_rate=0.1)
    assert cli.main(["train", "--config", str(cfg)]) == 1
    assert "learning_rate" in capsys.readouterr().err


def test_seed_env_override(tmp_path, monkeypatch):
    cfg = write_config(tmp_path / "c.json")
    monkeypatch.setenv("PNOMA_SEED", "11")
    assert cli.load_config(cfg).seed == 11
    assert cli.load_config(cfg, seed=3).seed == 3
    monkeypatch.delenv("PNOMA_SEED")
    assert cli.load_config(cfg).seed == 5


def test_double_and_stage_init(trained_run, tmp_path):
    root, cfg = trained_run
    parent = root / "a" / "n1"
    before = digest(parent)
    assert cli.main(["double", "--config", str(cfg), "--checkpoint", str(parent), "--stages", "1",
                     "--out", str(tmp_path)]) == 0
    assert digest(parent) == before
    assert (tmp_path / "n2" / "manifest.json").exists()
    rows = read_csv(tmp_path / "stage_init.csv")
    assert rows[0][:4] == ["n", "parent_val_psnr", "matched_parent_val_psnr", "stage_start_val_psnr"]
    assert abs(float(rows[1][2]) - float(rows[1][3])) < 1e-9


def test_double_four_stages(trained_run, tmp_path):
    root, cfg = trained_run
    cfg4 = write_config(root / "c4.json", train={"max_epochs": 1})
    assert cli.main(["double", "--config", str(cfg4), "--checkpoint", str(root / "a" / "n1"),
                     "--stages", "4", "--out", str(tmp_path)]) == 0
    for n in (2, 4, 8, 16):
        assert (tmp_path / f"n{n}" / "params.bin").exists()
    assert cli.main(["params", "--checkpoint", str(tmp_path / "n16"), "--out", str(tmp_path)]) == 0
    rows = dict(read_csv(tmp_path / "params.csv")[1:])
    assert rows["projections"] == "131072"


def test_missing_parent(trained_run, tmp_path):
    _, cfg = trained_run
    assert cli.main(["double", "--config", str(cfg), "--checkpoint", str(tmp_path / "nope")]) == 2


def test_eval_and_friends(trained_run, tmp_path):
    root, cfg = trained_run
    ck = str(root / "a" / "n1")
    assert cli.main(["eval", "--config", str(cfg), "--checkpoint", ck, "--snr", "0,5,10,15",
                     "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "eval.csv")
    assert len(rows) == 5 and rows[0][0] == "model/snr"
    svg = (tmp_path / "eval.svg").read_text()
    assert svg.count("<polyline") == 1 and "SNR (dB)" in svg and "PSNR (dB)" in svg
    assert cli.main(["ortho", "--config", str(cfg), "--checkpoint", ck, "--out", str(tmp_path)]) == 0
    assert read_csv(tmp_path / "angle_hist.csv")[0] == ["bin_low_deg", "bin_high_deg", "count"]
    assert cli.main(["fairness", "--config", str(cfg), "--checkpoint", ck, "--out", str(tmp_path)]) == 1


def test_fairness_and_subset_on_two_users(trained_run, tmp_path):
    root, cfg = trained_run
    cli.main(["double", "--config", str(cfg), "--checkpoint", str(root / "a" / "n1"), "--stages", "1",
              "--out", str(tmp_path)])
    ck = str(tmp_path / "n2")
    assert cli.main(["fairness", "--config", str(cfg), "--checkpoint", ck, "--snr", "10",
                     "--out", str(tmp_path)]) == 0
    assert len(read_csv(tmp_path / "fairness.csv")) == 3
    assert cli.main(["subset", "--config", str(cfg), "--checkpoint", ck, "--active", "1",
                     "--snr", "5,10", "--out", str(tmp_path)]) == 0
    assert len(read_csv(tmp_path / "subset.csv")) == 3


def test_capacity(tmp_path):
    assert cli.main(["capacity", "--n-max", "16", "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "capacity.csv")
    assert len(rows) == 17 and rows[1][1] == rows[1][2]
    assert (tmp_path / "capacity.svg").read_text().count("<polyline") == 2


def test_exit_codes(tmp_path, monkeypatch):
    assert cli.main(["bogus"]) == 1
    assert cli.main(["params", "--checkpoint", str(tmp_path)]) == 2
    def boom(args):
        raise NumericError("non-finite gradient for parameter 'enc.out.w'")
    monkeypatch.setitem(cli.COMMANDS, "capacity", boom)
    assert cli.main(["capacity", "--out", str(tmp_path)]) == 3

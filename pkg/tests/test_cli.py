import subprocess
import sys

import pytest

from lmcat.cli import build_parser, main, parse_config
from lmcat.data import load_dataset
from lmcat.errors import ConfigError
from lmcat.model import LMCAT, checkpoint_bytes, load_checkpoint
from lmcat.train import read_report_csv


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "unl"), "--samples", "16", "--patch", "4", "--unlabeled"]) == 0
    assert main(["synth", "--out", str(root / "pool"), "--samples", "120", "--patch", "4", "--seed", "1"]) == 0
    return root


def test_synth_is_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(["synth", "--out", str(tmp_path / name), "--samples", "5", "--patch", "4", "--seed", "7"]) == 0
    for f in ("manifest.txt", "sar.bin", "opt.bin"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert load_dataset(tmp_path / "a").synth.classes == 11


def test_synth_zero_samples(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "e"), "--samples", "0", "--patch", "4"]) == 0
    assert len(load_dataset(tmp_path / "e")) == 0


def test_pretrain_defaults_echoed(workdir, capsys):
    out = workdir / "zero.ckpt"
    assert main(["pretrain", "--data", str(workdir / "unl"), "--out", str(out), "--epochs", "1", "--batch", "8",
                 "--lr", "0", "--dtype", "float64"]) == 0
    text = capsys.readouterr().out
    assert '"lr": 0.0' in text
    model, meta = load_checkpoint(out)
    assert meta["stage"] == "pretrained" and meta["extra"]["run"]["epochs"] == 1
    # lr 0: weights equal a fresh initialization with the same seed and config
    fresh = LMCAT(model.config, seed=0, dtype=model.dtype)
    assert checkpoint_bytes(fresh, "pretrained", meta["extra"]) == out.read_bytes()
    rows = read_report_csv((workdir / "zero.ckpt.csv").read_text())
    assert len(rows) == 1


def test_default_lr_in_effective_config(workdir, capsys):
    assert main(["pretrain", "--data", str(workdir / "unl"), "--out", str(workdir / "d.ckpt"), "--epochs", "0"]) == 0
    assert '"lr": 0.0003' in capsys.readouterr().out


def test_preset_and_config_file(workdir, tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# desk run\nepochs = 1   # one pass\ntau = 0.5\nn_layers = 2\n")
    assert main(["pretrain", "--data", str(workdir / "unl"), "--out", str(tmp_path / "m.ckpt"), "--preset", "desk",
                 "--config", str(cfg)]) == 0
    text = capsys.readouterr().out
    assert '"batch": 32' in text and '"epochs": 1' in text
    model, _ = load_checkpoint(tmp_path / "m.ckpt")
    assert model.config.tau == 0.5 and model.config.n_layers == 2


def test_finetune_reports_split_and_hash(workdir, capsys):
    ckpt = workdir / "zero.ckpt"
    if not ckpt.exists():
        main(["pretrain", "--data", str(workdir / "unl"), "--out", str(ckpt), "--epochs", "0"])
    capsys.readouterr()
    out = workdir / "ft.ckpt"
    assert main(["finetune", "--ckpt", str(ckpt), "--data", str(workdir / "pool"), "--k", "5", "--out", str(out),
                 "--epochs", "2"]) == 0
    text = capsys.readouterr().out
    assert "labeled samples: 55" in text
    assert "frozen hash before" in text and text.rstrip().splitlines()[-2].endswith("equal")
    assert load_checkpoint(out)[1]["stage"] == "finetuned"

    assert main(["eval", "--ckpt", str(out), "--data", str(workdir / "pool")]) == 0
    assert "OA " in capsys.readouterr().out

    csv_path = workdir / "sweep.csv"
    assert main(["sweep", "--ckpt", str(out), "--data", str(workdir / "pool"), "--out", str(csv_path)]) == 0
    fracs = [ln.split(",")[2] for ln in csv_path.read_text().splitlines()[1:]]
    assert fracs == ["0.0", "0.1", "0.2", "0.3", "0.4", "0.5"]

    # fine-tuning a fine-tuned checkpoint warns but proceeds
    assert main(["finetune", "--ckpt", str(out), "--data", str(workdir / "pool"), "--k", "5",
                 "--out", str(workdir / "ft2.ckpt"), "--epochs", "1"]) == 0


def test_k_too_large_names_class(workdir, capsys):
    main(["pretrain", "--data", str(workdir / "unl"), "--out", str(workdir / "z.ckpt"), "--epochs", "0"])
    code = main(["finetune", "--ckpt", str(workdir / "z.ckpt"), "--data", str(workdir / "pool"), "--k", "9999",
                 "--out", str(workdir / "x.ckpt")])
    assert code == 2
    assert "class" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [
    ["pretrain", "--data", "/nonexistent/data", "--out", "x.ckpt"],
    ["eval", "--ckpt", "/nonexistent.ckpt", "--data", "/nonexistent/data"],
    ["sweep", "--ckpt", "/nonexistent.ckpt", "--data", "/nonexistent/data"],
])
def test_missing_inputs_exit_2(argv, capsys):
    assert main(argv) == 2
    assert "error:" in capsys.readouterr().err


def test_corrupt_checkpoint_exit_2(workdir, tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage")
    assert main(["eval", "--ckpt", str(bad), "--data", str(workdir / "pool")]) == 2


def test_unknown_config_key(tmp_path, workdir):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("epochs = 1\nlearning_rate = 3\n")
    assert main(["pretrain", "--data", str(workdir / "unl"), "--out", str(tmp_path / "m"), "--config", str(cfg)]) == 2


def test_parse_config():
    text = "epochs = 1\ntoken_reduce = false\n\n# comment\ntau = 0.5 # trailing\n"
    assert parse_config(text) == {"epochs": 1, "token_reduce": False, "tau": 0.5}
    with pytest.raises(ConfigError, match=":2"):
        parse_config("epochs = 1\nnot a pair\n")
    with pytest.raises(ConfigError):
        parse_config("epochs = many\n")


def test_params_output(capsys):
    assert main(["params"]) == 0
    text = capsys.readouterr().out
    assert "U-MAA Layers: 393,216 (reference: 394K)" in text
    assert "520" in text and "552" in text and "1,408" in text
    assert text.count("note:") >= 3


def test_help_lists_defaults():
    help_text = build_parser().format_help()
    for cmd in ("synth", "pretrain", "finetune", "eval", "sweep", "ablate", "params"):
        assert cmd in help_text
    sub = subprocess.run([sys.executable, "-m", "lmcat.cli", "pretrain", "--help"], capture_output=True, text=True)
    assert sub.returncode == 0
    assert "default 0.0003" in sub.stdout and "default 128" in sub.stdout and "default 50" in sub.stdout


def test_ablate_emits_five_rows(workdir, tmp_path, capsys):
    out = tmp_path / "abl.csv"
    code = main(["ablate", "--unlabeled", str(workdir / "unl"), "--pool", str(workdir / "pool"),
                 "--test", str(workdir / "pool"), "--k", "2", "--seeds", "0", "--epochs", "1", "--batch", "8",
                 "--out", str(out)])
    assert code == 0
    rows = [ln.split(",")[0] for ln in out.read_text().splitlines() if not ln.startswith("#")][1:]
    assert rows == ["full", "no_umaa", "no_contrastive", "no_msa", "no_token_reduce"]
    table = capsys.readouterr().out
    for label in ("Full L-MCAT", "- U-MAA", "- Contrastive Loss", "- MSA", "- Token Reduction"):
        assert label in table

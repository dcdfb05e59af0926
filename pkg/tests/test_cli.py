import os

import pytest

from domainsmooth import cli
from domainsmooth.cli import ConfigError, dispatch, load_config, read_config_file
from domainsmooth.data import load_features, load_split
from domainsmooth.model import load_checkpoint

SMALL = ["--n_categories", "5", "--samples_per_category", "12", "--dim", "10"]
TINY_TRAIN = ["--epochs", "1", "--batch_size", "16", "--hidden", "12", "--d_emb", "12", "--proj_hidden", "8"]


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("DSN_SEED", raising=False)
    return tmp_path


@pytest.fixture
def pipeline(workdir):
    assert dispatch(["synth", "--images", "i.dsnf", "--sketches", "s.dsnf", "--meta", "m.txt"] + SMALL) == 0
    assert dispatch(["split", "--images", "i.dsnf", "--out", "split.txt", "--n_unseen", "2"]) == 0
    assert dispatch(["train", "--images", "i.dsnf", "--sketches", "s.dsnf", "--split", "split.txt",
                     "--checkpoint", "m.ckpt", "--log", "log.csv"] + TINY_TRAIN) == 0
    return workdir


def test_help_exits_zero(capsys):
    assert dispatch(["train", "--help"]) == 0
    assert "--checkpoint" in capsys.readouterr().out


def test_empty_config_standard_defaults():
    cfg = load_config("train", {}, {}, env={})
    assert cfg["tau"] == 0.07 and cfg["k"] == 10
    assert (cfg["lambda1"], cfg["lambda2"], cfg["lambda3"]) == (0.1, 1.0, 1.0)
    assert (cfg["batch_size"], cfg["epochs"], cfg["lr_initial"], cfg["lr_final"]) == (96, 10, 1e-4, 1e-7)
    assert set(cfg.provenance.values()) == {"default"}


def test_flag_overrides_file(workdir):
    (workdir / "c.cfg").write_text("# comment\nlambda1 = 0.5\nepochs=3\n")
    cfg = load_config("train", read_config_file("c.cfg"), {"lambda1": "0"}, env={})
    assert cfg["lambda1"] == 0.0 and cfg.provenance["lambda1"] == "flag"
    assert cfg["epochs"] == 3 and cfg.provenance["epochs"] == "file"
    assert cfg.metadata()["config.lambda1"] == "0.0 (flag)"


def test_typo_rejected_with_suggestion(workdir):
    (workdir / "c.cfg").write_text("lamda1=0\n")
    with pytest.raises(ConfigError, match="did you mean 'lambda1'"):
        read_config_file("c.cfg")


def test_type_mismatch():
    with pytest.raises(ConfigError):
        load_config("train", {"epochs": "ten"}, {}, env={})
    with pytest.raises(ConfigError):
        load_config("train", {"use_ml": "maybe"}, {}, env={})
    with pytest.raises(ConfigError):
        load_config("train", {"lr_final": "1"}, {}, env={})  # above lr_initial


def test_env_seed_fallback():
    assert load_config("train", {}, {}, env={"DSN_SEED": "9"})["seed"] == 9
    cfg = load_config("train", {}, {"seed": "3"}, env={"DSN_SEED": "9"})
    assert cfg["seed"] == 3 and cfg.provenance["seed"] == "flag"


def test_bench_profile_only_fills_defaults():
    cfg = load_config("ablate", {}, {"lr_initial": "0.5"}, env={}, default_profile="bench")
    assert cfg["lr_initial"] == 0.5
    assert cfg.provenance["lr_final"] == "profile:bench"
    assert cfg["tau"] == 0.07 and cfg["k"] == 10


def test_pipeline_outputs(pipeline):
    assert len(load_split("split.txt").unseen) == 2
    assert load_features("i.dsnf").dim == 10
    assert load_checkpoint("m.ckpt").dims["d_in"] == 10
    log = (pipeline / "log.csv").read_text()
    assert "# config.tau=0.07 (default)" in log
    assert "# loss.reduction=" in log
    for metric in ("cosine", "hamming"):
        out = f"rep-{metric}.csv"
        assert dispatch(["eval", "--checkpoint", "m.ckpt", "--images", "i.dsnf", "--sketches", "s.dsnf",
                         "--split", "split.txt", "--out", out, "--metric", metric, "--bits", "8"]) == 0
        text = (pipeline / out).read_text()
        assert "# eval.ap_variant=" in text and f"metric={metric}" in text
    assert dispatch(["simmat", "--checkpoint", "m.ckpt", "--images", "i.dsnf", "--sketches", "s.dsnf",
                     "--split", "split.txt", "--out", "sim.csv"]) == 0
    assert dispatch(["itq", "--checkpoint", "m.ckpt", "--images", "i.dsnf", "--split", "split.txt",
                     "--encode", "s.dsnf", "--out", "codes.csv", "--bits", "8"]) == 0
    rows = [r for r in (pipeline / "codes.csv").read_text().splitlines() if not r.startswith("#")]
    assert rows[0] == "index,label,code" and len(rows) == 61
    assert len(rows[1].split(",")[2]) == 8


def test_missing_checkpoint_no_partial_output(pipeline, capsys):
    code = dispatch(["eval", "--checkpoint", "missing.ckpt", "--images", "i.dsnf", "--sketches", "s.dsnf",
                     "--split", "split.txt", "--out", "rep.csv"])
    assert code == cli.EXIT_CONFIG
    assert not (pipeline / "rep.csv").exists()
    assert "missing.ckpt" in capsys.readouterr().err


def test_corrupt_checkpoint_is_io_error(pipeline):
    (pipeline / "bad.ckpt").write_bytes(b"nope")
    code = dispatch(["eval", "--checkpoint", "bad.ckpt", "--images", "i.dsnf", "--sketches", "s.dsnf",
                     "--split", "split.txt", "--out", "rep.csv"])
    assert code == cli.EXIT_IO
    assert not (pipeline / "rep.csv").exists()


def test_numeric_failure_exit_code(pipeline):
    # 13 bits from a 12-dim embedding: not enough principal components
    code = dispatch(["eval", "--checkpoint", "m.ckpt", "--images", "i.dsnf", "--sketches", "s.dsnf",
                     "--split", "split.txt", "--out", "rep.csv", "--metric", "hamming", "--bits", "13"])
    assert code == cli.EXIT_NUMERIC
    assert not (pipeline / "rep.csv").exists()


def test_unknown_flag_and_bad_output_dir(workdir, capsys):
    assert dispatch(["synth", "--images", "a", "--sketches", "b", "--lamda1", "0"]) == cli.EXIT_CONFIG
    assert "--lambda1" in capsys.readouterr().err
    assert dispatch(["synth", "--images", "nodir/a", "--sketches", "b"]) == cli.EXIT_CONFIG
    assert os.listdir(workdir) == []


def test_failed_commit_leaves_nothing(workdir, monkeypatch):
    def boom(src, dst):
        raise OSError("disk full")

    monkeypatch.setattr(os, "replace", boom)
    assert dispatch(["synth", "--images", "a", "--sketches", "b", "--meta", "m"] + SMALL) == cli.EXIT_IO
    assert os.listdir(workdir) == []


def test_import_csv(workdir):
    (workdir / "f.csv").write_text("0,1,2\n1,3,4\n")
    assert dispatch(["import-csv", "--csv", "f.csv", "--modality", "sketch", "--out", "f.dsnf"]) == 0
    fs = load_features("f.dsnf")
    assert fs.labels.tolist() == [0, 1] and fs.modality.name == "SKETCH"


def test_training_deterministic_through_cli(pipeline):
    assert dispatch(["train", "--images", "i.dsnf", "--sketches", "s.dsnf", "--split", "split.txt",
                     "--checkpoint", "m2.ckpt", "--log", "log2.csv"] + TINY_TRAIN) == 0
    assert (pipeline / "m.ckpt").read_bytes() == (pipeline / "m2.ckpt").read_bytes()
    assert (pipeline / "log.csv").read_text() == (pipeline / "log2.csv").read_text()


def test_ablate_small_deterministic(workdir, capsys):
    args = ["ablate", "--seed", "7", "--n_seeds", "1", "--epochs", "1", "--bits", "8",
            "--hidden", "16", "--d_emb", "16", "--proj_hidden", "8", "--latent_dim", "none", "--n_unseen", "2"] + SMALL
    assert dispatch(args + ["--out", "a.txt"]) == 0
    assert dispatch(args + ["--out", "b.txt"]) == 0
    a = (workdir / "a.txt").read_text()
    assert a == (workdir / "b.txt").read_text()
    assert "full" in a and "baseline+cmcm" in a and "# config.seed=7 (flag)" in a
    assert a in capsys.readouterr().out

import json

import pytest

from minimt.cli import main
from minimt.config import ConfigError, config_from_dict, load_config
from minimt.experiment import ExperimentRunner, make_preset


def fast_smoke(out_dir, seed=0, steps=6):
    config = make_preset("smoke", out_dir, seed=seed)
    config.train.steps = steps
    config.train.log_interval = 3
    return config


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    """One fast end-to-end experiment shared by the command tests."""
    out = tmp_path_factory.mktemp("smoke_run")
    config = fast_smoke(out)
    config_path = out / "exp.json"
    config.save(config_path)
    report = ExperimentRunner(config).run()
    return out, config_path, report


# --- config file ------------------------------------------------------------------

def test_config_roundtrip(tmp_path):
    config = fast_smoke(tmp_path / "run")
    path = tmp_path / "config.json"
    config.save(path)
    loaded = load_config(path)
    assert loaded.to_dict() == config.to_dict()


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="unknown key"):
        config_from_dict({"seeed": 3})
    with pytest.raises(ConfigError, match="model.*unknown|unknown key"):
        config_from_dict({"model": {"d_modell": 8}})


def test_config_rejects_bad_direction():
    with pytest.raises(ConfigError, match="direction"):
        config_from_dict({"directions": ["aa->zz"]})


def test_preset_paper_faithful_protocol():
    config = make_preset("paper-faithful", "/tmp/unused")
    assert config.data.parallel_split == [100_000, 20_000, 5_000]
    assert config.data.mono_split == [70_000, 0, 0]
    assert config.train.batch_size == 16
    assert config.train.mtl_batch_size == 2
    assert config.train.epochs == 1 and config.train.steps is None
    assert config.optimizer.lr == 1e-5
    assert config.model.n_enc_layers == config.model.n_dec_layers == 12
    assert config.train.freeze == "first_half"
    assert config.decode.beam_size == 2
    assert config.decode.length_penalty == 1.2


def test_unknown_preset():
    with pytest.raises(ConfigError, match="preset"):
        make_preset("warp-speed", "/tmp/x")


# --- prepare -------------------------------------------------------------------------

def test_prepare_manifests_have_exact_sizes(trained_run):
    out, _, _ = trained_run
    manifest = json.loads((out / "manifests" / "parallel.json").read_text())
    assert {k: len(v) for k, v in manifest["indices"].items()} == {
        "train": 120, "validation": 10, "test": 10}
    assert (out / "vocab.txt").exists()


def test_prepare_rerun_is_identical(tmp_path, capsys):
    config = fast_smoke(tmp_path / "run", seed=3)
    path = tmp_path / "c.json"
    config.save(path)
    assert main(["prepare", "--config", str(path)]) == 0
    first = (tmp_path / "run" / "manifests" / "parallel.json").read_bytes()
    assert main(["prepare", "--config", str(path)]) == 0
    assert "cached" in capsys.readouterr().out
    assert (tmp_path / "run" / "manifests" / "parallel.json").read_bytes() == first


def test_prepare_oversize_split_names_corpus(tmp_path, capsys):
    config = fast_smoke(tmp_path / "run", seed=1)
    config.data.parallel_split = [10_000, 0, 0]
    path = tmp_path / "c.json"
    config.save(path)
    assert main(["prepare", "--config", str(path)]) == 1
    err = capsys.readouterr().err
    assert "parallel" in err and "prepare" in err


# --- train ---------------------------------------------------------------------------

def test_train_baseline_warns_about_mono(tmp_path, caplog):
    config = fast_smoke(tmp_path / "run", steps=2)
    path = tmp_path / "c.json"
    config.save(path)
    with caplog.at_level("WARNING"):
        assert main(["train", "--config", str(path), "--mode", "baseline",
                     "--direction", "aa->bb"]) == 0
    assert "ignores" in caplog.text
    assert (tmp_path / "run" / "aa-bb" / "baseline" / "checkpoint.npz").exists()
    assert (tmp_path / "run" / "aa-bb" / "baseline" / "metrics.tsv").exists()


def test_train_mtl_requires_mono(tmp_path, capsys):
    config = fast_smoke(tmp_path / "run", steps=2)
    config.data.mono_files = {}
    path = tmp_path / "c.json"
    config.save(path)
    assert main(["train", "--config", str(path), "--mode", "mtl"]) == 1
    assert "monolingual" in capsys.readouterr().err


# --- translate ------------------------------------------------------------------------

def test_translate_empty_input(trained_run, tmp_path):
    out, _, _ = trained_run
    src = tmp_path / "empty.txt"
    src.write_text("")
    dst = tmp_path / "out.txt"
    assert main(["translate",
                 "--checkpoint", str(out / "aa-bb" / "baseline" / "checkpoint.npz"),
                 "--vocab", str(out / "vocab.txt"),
                 "--input", str(src), "--output", str(dst)]) == 0
    assert dst.read_text() == ""


def test_translate_rerun_byte_identical(trained_run, tmp_path):
    out, _, _ = trained_run
    src = tmp_path / "in.txt"
    src.write_text("ka1 ka2 ka3\nka4 ka0\n")
    a, b = tmp_path / "a.txt", tmp_path / "b.txt"
    for dst in (a, b):
        assert main(["translate",
                     "--checkpoint", str(out / "aa-bb" / "mtl" / "checkpoint.npz"),
                     "--vocab", str(out / "vocab.txt"),
                     "--input", str(src), "--output", str(dst)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert len(a.read_text().splitlines()) == 2


def test_translate_rejects_foreign_vocab(trained_run, tmp_path, capsys):
    out, _, _ = trained_run
    bad_vocab = tmp_path / "vocab.txt"
    bad_vocab.write_text((out / "vocab.txt").read_text() + "extra_token\n")
    src = tmp_path / "in.txt"
    src.write_text("ka1\n")
    assert main(["translate",
                 "--checkpoint", str(out / "aa-bb" / "baseline" / "checkpoint.npz"),
                 "--vocab", str(bad_vocab),
                 "--input", str(src), "--output", str(tmp_path / "o.txt")]) == 1
    assert "vocabulary" in capsys.readouterr().err


# --- evaluate -------------------------------------------------------------------------

def test_evaluate_identical_files_is_100(tmp_path, capsys):
    hyp = tmp_path / "h.txt"
    ref = tmp_path / "r.txt"
    text = "the cat sat on the mat\nhello beautiful translated world\n"
    hyp.write_text(text)
    ref.write_text(text)
    assert main(["evaluate", "--hypotheses", str(hyp), "--references", str(ref)]) == 0
    assert "BLEU = 100.00" in capsys.readouterr().out


def test_evaluate_matches_module_fixture(tmp_path, capsys):
    hyp = tmp_path / "h.txt"
    ref = tmp_path / "r.txt"
    hyp.write_text("a b x y\n")
    ref.write_text("a b c d\n")
    assert main(["evaluate", "--hypotheses", str(hyp), "--references", str(ref)]) == 0
    assert "BLEU = 16.82" in capsys.readouterr().out


def test_evaluate_line_count_mismatch(tmp_path, capsys):
    hyp = tmp_path / "h.txt"
    ref = tmp_path / "r.txt"
    hyp.write_text("a\nb\n")
    ref.write_text("a\n")
    assert main(["evaluate", "--hypotheses", str(hyp), "--references", str(ref)]) == 1
    assert "line counts differ" in capsys.readouterr().err


# --- experiment -----------------------------------------------------------------------

def test_experiment_report_shape(trained_run):
    out, _, report = trained_run
    assert [r.direction for r in report.rows] == ["aa->bb", "bb->aa"]
    table = (out / "report.txt").read_text()
    assert "baseline" in table and "MTL" in table and "relative" in table
    tsv = (out / "report.tsv").read_text().strip().splitlines()
    assert len(tsv) == 2
    for row in report.rows:
        assert row.relative == pytest.approx((row.mtl - row.baseline) / row.baseline)
        assert row.delta == pytest.approx(row.mtl - row.baseline)


def test_experiment_rerun_hits_cache(trained_run, capsys):
    out, config_path, report = trained_run
    assert main(["-v", "experiment", "--config", str(config_path)]) == 0
    captured = capsys.readouterr()
    # every stage but the cheap report assembly is cached
    assert "running" not in captured.err + captured.out.replace("cached", "")
    again = (out / "report.txt").read_text()
    for row in report.rows:
        assert f"{row.baseline * 100:.2f}" in again


def test_experiment_outputs_laid_out_per_direction_and_regime(trained_run):
    out, _, _ = trained_run
    for d in ("aa-bb", "bb-aa"):
        for regime in ("baseline", "mtl"):
            base = out / d / regime
            for artifact in ("checkpoint.npz", "metrics.tsv", "hypotheses.txt",
                             "references.txt", "bleu.json"):
                assert (base / artifact).exists(), f"{d}/{regime}/{artifact}"
    manifest = json.loads((out / "manifest.json").read_text())
    assert "config_fingerprint" in manifest
    assert len(manifest["stages"]) == 1 + 4 * 3  # prepare + 4 runs x (train, translate, evaluate)


def test_experiment_deterministic_across_directories(tmp_path):
    reports = []
    for sub in ("one", "two"):
        config = fast_smoke(tmp_path / sub, seed=11)
        ExperimentRunner(config).run()
        reports.append({
            "report": (tmp_path / sub / "report.tsv").read_text(),
            "metrics": (tmp_path / sub / "aa-bb" / "mtl" / "metrics.tsv").read_text(),
            "hyps": (tmp_path / sub / "aa-bb" / "mtl" / "hypotheses.txt").read_text(),
        })
    assert reports[0] == reports[1]

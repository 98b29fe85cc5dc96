import csv
import json

import pytest

from mar3d.cli import (EXIT_CONFIG, EXIT_DATA, ConfigError, load_experiment, main, parse_config)

TINY_INI = """
[experiment]
seed = 2

[phantoms]
image_size = 80, 80
slice_range = 8, 9

[dataset]
n_clean = 2
n_artifact = 2
n_test_phantoms = 1
m_values = 1-2

[train]
steps_per_epoch = 2
batch_size = 1
crop = 32
gen_depth = 2
gen_width = 4
checkpoint_interval = 1

[metrics]
figure_volumes = 1
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY_INI)
    return path


def test_defaults_filled():
    values = parse_config("[train]\nn_slices = 5\n")
    assert values["train"]["n_slices"] == 5
    assert values["train"]["lambda_int"] == 25.0
    assert values["dataset"]["m_values"] == tuple(range(1, 9))


@pytest.mark.parametrize("text,match", [
    ("[bogus]\nx = 1\n", "unknown section"),
    ("[train]\nlearning_rate = 1\n", "unknown key"),
    ("[train]\nn_slices = three\n", "n_slices"),
])
def test_schema_rejections(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(text)


def test_committed_default_config():
    exp = load_experiment("configs/default.ini")
    assert exp.dataset.n_clean == 24 and exp.dataset.n_artifact == 16
    assert exp.dataset.image_size == (128, 128)
    assert exp.train.n_slices == 3 and exp.train.variant.value == "PROPOSED"
    assert exp.train.total_steps <= 30_000
    w = exp.train.weights
    assert (w.lambda_cyc, w.lambda_int, w.lambda_fea) == (10.0, 25.0, 1.0)


def test_exit_codes(tmp_path, tiny_config):
    bad = tmp_path / "bad.ini"
    bad.write_text("[train]\nfoo = 1\n")
    assert main(["build-data", "--config", str(bad)]) == EXIT_CONFIG
    assert main(["build-data", "--config", str(tmp_path / "missing.ini")]) == EXIT_CONFIG
    assert main(["train", "--config", str(tiny_config), "--out", str(tmp_path / "empty")]) == EXIT_DATA


def test_pipeline(tmp_path, tiny_config, capsys):
    out = tmp_path / "run"
    common = ["--config", str(tiny_config), "--out", str(out)]
    assert main(["build-data", *common]) == 0
    first = (out / "data" / "test" / "manifest.jsonl").read_bytes()
    assert main(["build-data", *common]) == 0
    assert (out / "data" / "test" / "manifest.jsonl").read_bytes() == first

    assert main(["train", *common]) == 0
    ckpt = out / "train" / "PROPOSED-N3" / "checkpoint.pt"
    assert ckpt.exists()
    with open(out / "train" / "PROPOSED-N3" / "loss.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 2

    for mode in ("SINGLE", "SEQUENTIAL"):
        assert main(["translate", *common, "--mode", mode]) == 0
        assert (out / "translate" / f"PROPOSED-N3-{mode}" / "timing.csv").exists()
    assert main(["translate", *common, "--n-slices", "5", "--checkpoint", str(ckpt)]) == EXIT_CONFIG
    assert "N=3" in capsys.readouterr().err

    results = out / "translate" / "PROPOSED-N3-SEQUENTIAL"
    (results / "volumes" / "test-000-m2.vxmr").unlink()
    assert main(["evaluate", *common, "--results", str(results)]) == 0
    ev = out / "evaluate" / results.name
    assert "test-000-m2" in (ev / "omissions.txt").read_text()
    with open(ev / "table.csv") as fh:
        table = list(csv.DictReader(fh))
    assert {(r["m"], r["method"]) for r in table} == {("1", "original"), ("2", "original"), ("1", "PROPOSED")}
    with open(ev / "metrics.csv") as fh:
        for row in csv.DictReader(fh):
            rate = (float(row["ssim"]) - float(row["ssim_original"])) / float(row["ssim_original"]) * 100
            assert abs(rate - float(row["r_s"])) < 1e-9


def test_variant_flag_and_resume(tmp_path, tiny_config):
    out = tmp_path / "run"
    common = ["--config", str(tiny_config), "--out", str(out)]
    assert main(["build-data", *common]) == 0
    assert main(["train", *common, "--variant", "CGAN"]) == 0
    ckpt = out / "train" / "CGAN-N3" / "checkpoint.pt"
    before = ckpt.read_bytes()
    # a finished run is picked up from its checkpoint rather than retrained
    assert main(["train", *common, "--variant", "CGAN"]) == 0
    assert ckpt.read_bytes() == before


def test_reproduce_all(tmp_path, tiny_config, capsys):
    assert main(["reproduce-all", "--config", str(tiny_config), "--out", str(tmp_path / "r")]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert set(summary) == {"median_r_s", "per_m_ssim"}
    assert set(summary["per_m_ssim"]) == {"1", "2"}

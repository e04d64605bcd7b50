import json

import pytest

from dorl import cli
from dorl.errors import NumericError

TINY_CFG = """dorl-config 1
profile = tiny
seed = 1
n_classes = 3
n_per_class = 8
annotated_fraction = 0.2
seg_epochs = 2
cae_epochs = 1
cae_batch_size = 8
folds = 2
classifiers = logreg
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY_CFG)
    assert cli.main(["gen-data", "--config", str(cfg), "--out", str(root / "data"),
                     "--size", "32"]) == 0
    return root, cfg


def test_end_to_end_commands(workspace, capsys):
    root, cfg = workspace
    data = [str(root / "data" / d) for d in ("lab_a", "lab_b", "lab_c")]
    common = ["--config", str(cfg)]
    assert cli.main(["train-seg", *common, "--data", data[0], "--out", str(root / "seg")]) == 0
    assert cli.main(["embed", "--seg", str(root / "seg" / "seg.ckpt"), "--data", *data,
                     "--out", str(root / "emb")]) == 0
    emb = [str(root / "emb" / d) for d in ("lab_a", "lab_b", "lab_c")]
    assert cli.main(["train-cae", *common, "--embeddings", *emb, "--out", str(root / "cae")]) == 0
    trace = json.loads((root / "cae" / "cae_trace.json").read_text())
    assert len(trace) == 1
    assert cli.main(["extract", "--cae", str(root / "cae" / "cae.ckpt"), "--embeddings", *emb,
                     "--reconstructions", "2", "--out", str(root / "feat")]) == 0
    assert len(list((root / "feat" / "reconstructions" / "lab_b").glob("*.png"))) == 4
    capsys.readouterr()
    assert cli.main(["classify", "--algorithm", "logreg",
                     "--train", str(root / "feat" / "lab_a.features"),
                     "--test", str(root / "feat" / "lab_b.features"),
                     "--out", str(root / "clf")]) == 0
    acc = json.loads(capsys.readouterr().out)
    assert set(acc) == {"lab_b"} and 0.0 <= acc["lab_b"] <= 1.0
    assert (root / "clf" / "predictions_lab_b.csv").exists()


def test_histogram_command(workspace, capsys):
    root, _ = workspace
    data = [str(root / "data" / d) for d in ("lab_a", "lab_b")]
    assert cli.main(["histogram", "--data", *data, "--bins", "16", "--out", str(root / "h")]) == 0
    lines = (root / "h" / "histogram.csv").read_text().splitlines()
    assert lines[0] == "bin,lab_a,lab_b" and len(lines) == 17
    assert "mean gray level" in capsys.readouterr().out


def test_evaluate_and_global_flag_order(workspace, tmp_path, capsys):
    _, cfg = workspace
    assert cli.main(["--seed", "4", "evaluate", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "report" / "report.json").read_text())
    assert rep["seed"] == 4 and rep["config"]["profile"] == "tiny"
    assert "cross-domain" in capsys.readouterr().out


def test_exit_codes(workspace, tmp_path, capsys):
    root, cfg = workspace
    assert cli.main(["evaluate", "--config", str(tmp_path / "missing.cfg")]) == 2
    bad = tmp_path / "bad.cfg"
    bad.write_text("dorl-config 1\nwidth = 3\n")
    assert cli.main(["evaluate", "--config", str(bad)]) == 2
    assert cli.main(["histogram", "--data", str(tmp_path / "nothing"), "--out", str(tmp_path)]) == 3
    assert cli.main(["train-cae", "--config", str(cfg), "--variant", "M5", "--embeddings",
                     str(tmp_path), str(tmp_path), "--out", str(tmp_path)]) == 3
    assert cli.main(["sweep", "--betas", "a,b", "--out", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    assert "dorl evaluate: error:" in err


def test_numeric_failure_exit_code(monkeypatch):
    def boom(args):
        raise NumericError("matmul")
    monkeypatch.setattr(cli, "cmd_histogram", boom)
    assert cli.main(["histogram", "--data", "x"]) == 4


def test_usage_error_exits_two():
    with pytest.raises(SystemExit) as exc:
        cli.main(["no-such-command"])
    assert exc.value.code == 2

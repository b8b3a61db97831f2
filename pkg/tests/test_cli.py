import json

import yaml

from swat_gda.cli import main


def last_json(capsys):
    out = capsys.readouterr().out.strip().splitlines()
    return json.loads(out[-1]) if out[-1].startswith(("{", "[")) else out


def test_prepare_train_analyze_report(tmp_path, capsys):
    root = str(tmp_path / "root")
    assert main(["--root", root, "prepare", "--dataset", "gaussian_drift", "--n-domains", "3",
                 "--samples", "80"]) == 0
    prepared = last_json(capsys)
    assert prepared["rows"] == [80, 80, 80]

    cfg = tmp_path / "train.yaml"
    cfg.write_text(yaml.safe_dump({"method": "swat", "train": {"epochs_per_phase": 1, "inter_steps": 1},
                                   "pretrain": {"epochs": 1}}))
    out = tmp_path / "run"
    assert main(["--root", root, "train", "--stream", prepared["stream"], "--config", str(cfg),
                 "--out", str(out)]) == 0
    trained = last_json(capsys)
    assert trained["method"] == "swat" and len(trained["per_domain_accuracy"]) == 3

    assert main(["--root", root, "analyze", "a-distance", "--run", str(out), "--pairs", "0:-1"]) == 0
    row = last_json(capsys)
    assert 0.0 <= row["a_distance"] <= 2.0
    assert main(["--root", root, "analyze", "export-embeddings", "--run", str(out)]) == 0
    assert len(last_json(capsys)) == 3


def test_grid_then_report(tmp_path, capsys):
    root = str(tmp_path / "root")
    cfg = tmp_path / "grid.yaml"
    cfg.write_text(yaml.safe_dump({
        "stream": {"dataset": "gaussian_drift", "n_domains": 3, "samples_per_domain": 80},
        "given": [2, 3], "methods": ["swat", "source_only"], "K": [0], "seeds": [0],
        "train": {"swat": {"epochs_per_phase": 1}}, "pretrain": {"epochs": 1},
    }))
    assert main(["--root", root, "grid", "--config", str(cfg)]) == 0
    head = capsys.readouterr().out.splitlines()[0]
    assert json.loads(head) == {"records": 4, "executed_runs": 4}
    csv_path = tmp_path / "t.csv"
    assert main(["--root", root, "report", "--layout", "method_comparison", "--csv", str(csv_path)]) == 0
    assert "swat_K0" in capsys.readouterr().out and csv_path.exists()


def test_report_without_records(tmp_path):
    assert main(["--root", str(tmp_path), "report"]) == 1


def test_verify_default(tmp_path, capsys):
    assert main(["--root", str(tmp_path), "verify"]) == 0
    assert last_json(capsys)["deterministic"] is True

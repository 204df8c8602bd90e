import json

from i2vmatch.cli import main
from i2vmatch.data import load_dataset


def tiny_config_file(tmp_path, **over):
    cfg = {
        "synth": {"num_identities": 6, "cameras_per_identity": 2,
                  "frames_per_video": [10, 14], "input_dim": 6,
                  "occlusion_prob": 0.3, "seed": 5},
        "trunk": {"input_dim": 6, "hidden_dims": [8, 8], "output_dim": 6},
        "loss": {"num_identities": 6},
        "num_nonlocal_blocks": 1,
        "p": 2, "k": 2, "t": 2, "stride": 2,
        "epochs": 1, "batches_per_epoch": 3,
        "eval_clip_len": 8, "k_max": 6, "seed": 0,
    }
    cfg.update(over)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


def test_synth_writes_dataset(tmp_path, capsys):
    cfg = tiny_config_file(tmp_path)
    out = tmp_path / "data.txt"
    assert main(["synth", "--config", str(cfg), "--out", str(out)]) == 0
    ds = load_dataset(out)
    assert len(ds.videos) == 12
    assert "12 videos" in capsys.readouterr().out


def test_train_eval_roundtrip(tmp_path, capsys):
    cfg = tiny_config_file(tmp_path)
    run_dir = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out-dir", str(run_dir)]) == 0
    assert (run_dir / "checkpoint.txt").exists()
    log_lines = (run_dir / "train_log.jsonl").read_text().splitlines()
    assert len(log_lines) == 1 + 3  # header + one record per batch
    report_path = tmp_path / "report.json"
    code = main(["eval", "--checkpoint", str(run_dir / "checkpoint.txt"),
                 "--protocol", "I2V", "--out", str(report_path)])
    assert code == 0
    doc = json.loads(report_path.read_text())
    assert doc["protocol"] == "I2V"
    assert doc["format"].startswith("i2vmatch-metrics/")
    assert "config_digest" in doc and "seed" in doc
    assert len(doc["cmc"]) <= 6


def test_eval_rejects_mismatched_config(tmp_path):
    cfg = tiny_config_file(tmp_path)
    run_dir = tmp_path / "run"
    main(["train", "--config", str(cfg), "--out-dir", str(run_dir)])
    (tmp_path / "o").mkdir()
    other = tiny_config_file(tmp_path / "o", seed=9)
    code = main(["eval", "--checkpoint", str(run_dir / "checkpoint.txt"),
                 "--config", str(other)])
    assert code == 1


def test_gradcheck_losses_scope_runs_six_checks(capsys):
    assert main(["gradcheck", "--scope", "losses"]) == 0
    out = capsys.readouterr().out
    assert "all 6 checks passed" in out
    for name in ("transfer_feat", "transfer_dist", "tri_i2v", "tri_integrated",
                 "cls", "total"):
        assert name in out


def test_gradcheck_all_scope(capsys):
    assert main(["gradcheck", "--scope", "all"]) == 0
    out = capsys.readouterr().out
    assert "all 9 checks passed" in out
    assert "nonlocal_block" in out


def test_sweep_command(tmp_path, capsys):
    cfg = tiny_config_file(tmp_path)
    out = tmp_path / "rows.json"
    code = main(["sweep", "--config", str(cfg), "--axis", "T", "--values", "1,2",
                 "--out", str(out)])
    assert code == 0
    rows = json.loads(out.read_text())
    assert [r["value"] for r in rows] == [1, 2]
    printed = capsys.readouterr().out
    assert "I2V top-1" in printed


def test_export_features(tmp_path):
    cfg = tiny_config_file(tmp_path)
    run_dir = tmp_path / "run"
    main(["train", "--config", str(cfg), "--out-dir", str(run_dir)])
    out = tmp_path / "feats.txt"
    code = main(["export-features", "--checkpoint", str(run_dir / "checkpoint.txt"),
                 "--which", "both", "--out", str(out)])
    assert code == 0
    lines = out.read_text().splitlines()
    assert lines[0].startswith("i2vmatch-dataset/1 dim=6")
    assert len(lines) == 1 + 6 + 6  # header + queries + gallery
    parts = lines[1].split()
    assert parts[2] == "1" and len(parts) == 3 + 6


def test_cli_validation_failure_exit_code(tmp_path):
    missing = tmp_path / "nope.json"
    assert main(["train", "--config", str(missing), "--out-dir", str(tmp_path)]) == 1
    assert main(["eval", "--checkpoint", str(tmp_path / "nothing.txt")]) == 1


def test_cli_bad_arguments_exit_code():
    assert main(["sweep", "--axis", "bogus", "--values", "1"]) == 1
    assert main(["frobnicate"]) == 1

"""Config validation and pipeline integration via the CLI surface."""

import json

import pytest

from ecgintervals import cli


TINY_CFG = {
    "seed": 77,
    "synth": {"n": 48, "zero_pr_fraction": 0.25},
    "model": {"ingest_filters": 4, "block_filters": [4, 6, 8, 10], "kernel": 8,
              "input_len": 2500, "head_hidden": 8},
    "train": {"lr0": 0.003, "batch_size": 16, "max_epochs": 1, "patience": 1},
}


class TestConfig:
    def test_defaults_valid(self):
        cfg = cli.load_config(None)
        assert cfg["seed"] == 1234
        assert cfg["model"]["block_filters"] == [128, 196, 256, 320]

    def test_unknown_field_path(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"train": {"lr_zero": 1}}))
        with pytest.raises(cli.ConfigError, match="train.lr_zero"):
            cli.load_config(str(p))

    def test_invalid_value_reports_field(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"train": {"lr0": -1}}))
        with pytest.raises(cli.ConfigError, match="train.lr0"):
            cli.load_config(str(p))

    def test_input_len_consistency(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"preprocess": {"target_rate": 500}}))
        with pytest.raises(cli.ConfigError, match="model.input_len"):
            cli.load_config(str(p))

    def test_seed_override(self, tmp_path):
        cfg = cli.load_config(None, seed_override=9)
        assert cfg["seed"] == 9

    def test_env_path_override(self, tmp_path, monkeypatch):
        monkeypatch.setenv("ECGINTERVALS_DATA_DIR", str(tmp_path / "elsewhere"))
        cfg = cli.load_config(None)
        assert cfg["paths"]["data_dir"] == str(tmp_path / "elsewhere")

    def test_hash_ignores_paths(self, monkeypatch):
        a = cli.load_config(None)
        monkeypatch.setenv("ECGINTERVALS_OUT_DIR", "/somewhere/else")
        b = cli.load_config(None)
        assert cli.config_hash(a) == cli.config_hash(b)

    def test_hash_tracks_science(self):
        a = cli.load_config(None)
        b = cli.load_config(None, seed_override=4321)
        assert cli.config_hash(a) != cli.config_hash(b)

    def test_bad_json_config(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text("{nope")
        assert cli.main(["--config", str(p), "split"]) == cli.EXIT_CONFIG


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One tiny end-to-end run shared by the integration assertions."""
    root = tmp_path_factory.mktemp("cli_pipeline")
    cfg_path = root / "cfg.json"
    cfg = dict(TINY_CFG)
    cfg["paths"] = {
        "data_dir": str(root / "data"),
        "cache_dir": str(root / "cache"),
        "out_dir": str(root / "out"),
    }
    cfg_path.write_text(json.dumps(cfg))
    base = ["--config", str(cfg_path), "--json"]
    steps = (
        ["synth"], ["split"],
        ["train", "--task", "qrs"], ["train", "--task", "prchk"],
        ["train", "--task", "pr"],
        ["infer", "--task", "qrs"], ["infer", "--task", "prchk"],
        ["infer", "--task", "pr"], ["infer", "--task", "tandem-pr"],
        ["delineate"], ["eval"], ["report"],
    )
    for step in steps:
        assert cli.main(base + step) == cli.EXIT_OK, f"step failed: {step}"
    return root, cfg_path


@pytest.mark.slow
class TestPipeline:
    def test_artifacts_exist(self, pipeline):
        root, _ = pipeline
        out = root / "out"
        assert (out / "checkpoints" / "qrs.ckpt").exists()
        assert (out / "logs" / "qrs.ndjson").exists()
        assert (out / "predictions" / "baseline-holdout.jsonl").exists()
        assert (out / "metrics" / "holdout.json").exists()
        assert (out / "report.json").exists()
        assert (out / "report.txt").exists()

    def test_artifacts_carry_config_hash(self, pipeline):
        root, cfg_path = pipeline
        cfg = cli.load_config(str(cfg_path))
        chash = cli.config_hash(cfg)
        manifest = json.loads((root / "data" / "manifest.json").read_text())
        assert manifest["config_hash"] == chash
        report = json.loads((root / "out" / "report.json").read_text())
        assert report["config_hash"] == chash
        first = (root / "out" / "predictions" / "qrs-holdout.jsonl").read_text().splitlines()[0]
        assert json.loads(first)["config_hash"] == chash

    def test_training_log_schema(self, pipeline):
        root, _ = pipeline
        lines = (root / "out" / "logs" / "qrs.ndjson").read_text().splitlines()
        for line in lines:
            entry = json.loads(line)
            assert {"epoch", "lr", "train_loss", "val_loss", "wall_s"} <= set(entry)

    def test_report_refuses_mixed_hashes(self, pipeline):
        root, cfg_path = pipeline
        metrics = root / "out" / "metrics" / "holdout.json"
        doc = json.loads(metrics.read_text())
        doc["config_hash"] = "0000000000000000"
        metrics.write_text(json.dumps(doc))
        assert cli.main(["--config", str(cfg_path), "report"]) == cli.EXIT_COMPUTE
        assert cli.main(["--config", str(cfg_path), "--json", "report", "--force"]) == cli.EXIT_OK
        # restore for other tests
        cfg = cli.load_config(str(cfg_path))
        doc["config_hash"] = cli.config_hash(cfg)
        metrics.write_text(json.dumps(doc))

    def test_eval_on_identity_fixture_gives_zero_mae(self, pipeline):
        root, cfg_path = pipeline
        cfg = cli.load_config(str(cfg_path))
        chash = cli.config_hash(cfg)
        manifest = json.loads((root / "data" / "manifest.json").read_text())
        holdout = [e for e in manifest["entries"]
                   if manifest["split_assignment"][e["record_id"]] == "holdout"]
        pred_path = root / "out" / "predictions" / "qrs-holdout.jsonl"
        header = {"kind": "predictions", "task": "qrs", "split": "holdout",
                  "dataset_id": "synthetic-holdout", "config_hash": chash}
        rows = [{"record_id": e["record_id"], "qrs_ms": e["labels"]["qrs_ms"]}
                for e in holdout]
        with open(pred_path, "w") as f:
            f.write(json.dumps(header) + "\n")
            for row in rows:
                f.write(json.dumps(row) + "\n")
        assert cli.main(["--config", str(cfg_path), "--json", "eval"]) == cli.EXIT_OK
        metrics = json.loads((root / "out" / "metrics" / "holdout.json").read_text())
        assert metrics["regression"]["qrs_ms"]["ikres-qrs"]["mae"] == 0.0

    def test_missing_checkpoint_io_error(self, pipeline):
        root, cfg_path = pipeline
        missing = root / "out" / "checkpoints" / "qt.ckpt"
        assert not missing.exists()
        assert cli.main(["--config", str(cfg_path), "infer", "--task", "qt"]) == cli.EXIT_IO

    def test_train_requires_task(self, pipeline):
        _, cfg_path = pipeline
        assert cli.main(["--config", str(cfg_path), "train"]) == cli.EXIT_CONFIG

import json
import subprocess
import sys

import numpy as np
import pytest

from sevnet.cli import main
from sevnet.config import SCHEMA, ConfigError, load_run_config, resolve
from sevnet.tensor import load_tensor

TINY_CFG = """
# desk-scale run
network.variant = sev
network.group_width = 1
network.num_classes = 4
network.dropout = 0.0
network.frames = 2
network.size = 32
data.num_classes = 4
data.clip_frames = 4
data.height = 40
data.width = 48
data.train_count = 8
data.eval_count = 4
data.seed = 11
data.crop_size = 32
train.epochs = 2
train.warmup_epochs = 1
train.batch_size = 8
train.seed = 3
train.track_train_accuracy = false
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_CFG)
    return path


class TestConfigFile:
    def test_defaults_fill_missing_keys(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("network.group_width = 6\n")
        cfg = load_run_config(path)
        assert cfg["network.group_width"] == 6
        assert cfg["train.momentum"] == 0.9
        assert cfg["network.variant"] == "sev"

    def test_unknown_key_fails_closed(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("network.group_widht = 6\n")
        with pytest.raises(ConfigError, match="unknown key"):
            load_run_config(path)

    def test_duplicate_key_rejected(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("train.seed = 1\ntrain.seed = 2\n")
        with pytest.raises(ConfigError, match="duplicate"):
            load_run_config(path)

    def test_bad_value_reports_key(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("train.epochs = soon\n")
        with pytest.raises(ConfigError, match="train.epochs"):
            load_run_config(path)

    def test_comments_and_blanks_ignored(self, tiny_config):
        cfg = load_run_config(tiny_config)
        assert cfg["data.train_count"] == 8

    def test_every_key_has_documented_default(self):
        cfg = resolve({})
        for key in SCHEMA:
            assert key in cfg.values
            assert SCHEMA[key][2]  # help text present


class TestHelp:
    def test_help_documents_every_config_key(self, capsys):
        with pytest.raises(SystemExit):
            main(["--help"])
        out = capsys.readouterr().out
        for key in SCHEMA:
            assert key in out, f"{key} missing from --help"

    def test_console_script_runs(self):
        res = subprocess.run([sys.executable, "-m", "sevnet.cli", "--version"],
                             capture_output=True, text=True)
        assert res.returncode == 0


class TestAnalyzeCommand:
    def test_flags_path_prints_totals(self, capsys):
        code = main(["analyze", "--variant", "sev", "--group-width", "8",
                     "--classes", "174", "--frames", "16", "--size", "224"])
        out = capsys.readouterr().out
        assert code == 0
        assert "total params 4,427,662" in out
        assert "14.44 G" in out

    def test_writes_report_files(self, tmp_path, capsys):
        out_txt = tmp_path / "rep.txt"
        out_json = tmp_path / "rep.json"
        code = main(["analyze", "--group-width", "2", "--classes", "8",
                     "--frames", "4", "--size", "32",
                     "--out", str(out_txt), "--json", str(out_json)])
        assert code == 0
        assert "fc" in out_txt.read_text()
        doc = json.loads(out_json.read_text())
        assert doc["total_params"] > 0

    def test_invalid_config_exits_one(self, capsys):
        code = main(["analyze", "--variant", "sev", "--group-width", "0"])
        assert code == 1
        assert "group_width" in capsys.readouterr().err

    def test_bad_se_reduction_exits_one_naming_cause(self, capsys):
        code = main(["analyze", "--group-width", "1", "--se",
                     "--se-reduction", "3"])
        assert code == 1
        assert "reduction" in capsys.readouterr().err

    def test_golden_pass_and_breach_exit_codes(self, tmp_path, capsys):
        good = tmp_path / "good.golden"
        good.write_text(
            "network.variant = sev\nnetwork.group_width = 8\n"
            "network.num_classes = 174\nnetwork.frames = 16\n"
            "network.size = 224\nexpect.params_m = 4.4\n"
            "expect.params_tol_pct = 2\nexpect.gmacs = 14.4\n"
            "expect.gmacs_tol_pct = 10\n"
        )
        assert main(["analyze", "--golden", str(good)]) == 0
        bad = tmp_path / "bad.golden"
        bad.write_text(
            "network.variant = sev\nnetwork.group_width = 8\n"
            "network.num_classes = 174\nnetwork.frames = 16\n"
            "network.size = 224\nexpect.params_m = 9.9\n"
        )
        capsys.readouterr()
        assert main(["analyze", "--golden", str(bad)]) == 3
        assert "FAIL" in capsys.readouterr().out

    def test_shipped_goldens_all_pass(self):
        import glob
        import os

        import sevnet

        pattern = os.path.join(os.path.dirname(sevnet.__file__),
                               "goldens", "*.golden")
        files = sorted(glob.glob(pattern))
        assert len(files) == 12
        assert main(["analyze", "--golden", *files]) == 0


class TestGradcheckCommand:
    def test_subset_passes(self, capsys):
        code = main(["gradcheck", "--sizes", "tiny", "--seed", "2",
                     "--ops", "relu,linear"])
        out = capsys.readouterr().out
        assert code == 0
        assert out.count("PASS") == 2

    def test_sabotage_fails_exactly_target(self, capsys):
        code = main(["gradcheck", "--sizes", "tiny", "--seed", "2",
                     "--ops", "relu,linear,sigmoid",
                     "--sabotage-op", "sigmoid"])
        out = capsys.readouterr().out
        assert code == 2
        assert "FAIL  sigmoid" in out
        assert out.count("FAIL") == 1

    def test_unknown_op_rejected(self, capsys):
        assert main(["gradcheck", "--ops", "warp"]) == 1


class TestSynthCommand:
    def test_manifest_rows_and_regeneration(self, tiny_config, tmp_path,
                                            capsys):
        out = tmp_path / "manifest.txt"
        assert main(["synth", "--spec", str(tiny_config),
                     "--out", str(out)]) == 0
        first = out.read_text()
        rows = [l for l in first.splitlines() if not l.startswith("#")]
        assert len(rows) == 8 + 4
        assert rows[0] == "train 0 0 11"
        assert main(["synth", "--spec", str(tiny_config),
                     "--out", str(out)]) == 0
        assert out.read_text() == first

    def test_clip_dump_roundtrips(self, tiny_config, tmp_path, capsys):
        out = tmp_path / "manifest.txt"
        dump = tmp_path / "dumps"
        assert main(["synth", "--spec", str(tiny_config), "--out", str(out),
                     "--dump-dir", str(dump), "--dump-count", "2"]) == 0
        from sevnet.datapipe import SyntheticMotionDataset
        from sevnet.config import load_run_config

        ds = SyntheticMotionDataset(
            load_run_config(tiny_config).synthetic_spec()
        )
        loaded = load_tensor(dump / "train_00000.t64")
        np.testing.assert_array_equal(
            loaded, ds.render_clip("train", 0).astype(np.float64)
        )


class TestTrainEvalCommands:
    def test_train_twice_identical_logs(self, tiny_config, tmp_path, capsys):
        cfg_text = tiny_config.read_text()
        logs = []
        for run in ("a", "b"):
            cfg = tmp_path / f"{run}.cfg"
            cfg.write_text(cfg_text + f"\noutput.dir = {tmp_path / run}\n")
            assert main(["train", "--config", str(cfg)]) == 0
            capsys.readouterr()
            logs.append((tmp_path / run / "metrics.jsonl").read_text())
        assert logs[0] == logs[1]

    def test_eval_checkpoint_roundtrip_and_chance_level(self, tiny_config,
                                                        tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text(tiny_config.read_text()
                       + f"\noutput.dir = {tmp_path / 'run'}\n")
        assert main(["train", "--config", str(cfg)]) == 0
        capsys.readouterr()
        code = main(["eval", "--config", str(cfg),
                     "--checkpoint", str(tmp_path / "run" / "final.ckpt"),
                     "--split", "eval"])
        out = capsys.readouterr().out
        assert code == 0
        assert "top1" in out

    def test_eval_missing_checkpoint_exits_one(self, tiny_config, capsys):
        code = main(["eval", "--config", str(tiny_config),
                     "--checkpoint", "/nonexistent.ckpt"])
        assert code == 1
        assert "not found" in capsys.readouterr().err

    def test_class_mismatch_distinct_diagnostic(self, tiny_config, tmp_path,
                                                capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text(tiny_config.read_text()
                       + f"\noutput.dir = {tmp_path / 'run'}\n")
        assert main(["train", "--config", str(cfg)]) == 0
        bad = tmp_path / "bad.cfg"
        bad.write_text(tiny_config.read_text().replace(
            "data.num_classes = 4", "data.num_classes = 6"
        ).replace("network.num_classes = 4", "network.num_classes = 6"))
        capsys.readouterr()
        code = main(["eval", "--config", str(bad),
                     "--checkpoint", str(tmp_path / "run" / "final.ckpt")])
        assert code == 1
        assert "classes" in capsys.readouterr().err

    def test_train_config_mismatch_rejected_before_output(self, tmp_path,
                                                          capsys):
        cfg = tmp_path / "bad.cfg"
        out_dir = tmp_path / "never"
        cfg.write_text(
            "network.num_classes = 5\ndata.num_classes = 4\n"
            f"output.dir = {out_dir}\n"
        )
        assert main(["train", "--config", str(cfg)]) == 1
        assert not out_dir.exists()

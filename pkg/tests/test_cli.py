import json
import shutil

import numpy as np
import pytest

from letlab.cli import main
from letlab.config import RunConfig, desk_defaults, load_config
from letlab.data import read_token_file
from letlab.errors import ConfigError
from letlab.trainer import load_checkpoint


@pytest.fixture
def tiny_config(tmp_path):
    """A complete config small enough for subprocess-free CLI tests."""
    cfg = desk_defaults(total_steps=4)
    cfg["output_dir"] = str(tmp_path / "out")
    cfg["model_m"].update({"hidden_size": 16, "intermediate_size": 24,
                           "num_layers": 4})
    cfg["model_t"].update({"hidden_size": 8, "intermediate_size": 16,
                           "num_layers": 2})
    cfg["data"]["length"] = 12_000
    cfg["train"].update({"total_steps": 4, "batch_size": 4, "seq_len": 16,
                         "eval_interval": 2})
    cfg["alignment"]["s_stop"] = 2
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


def teacher_ready(tiny_config):
    assert main(["pretrain-teacher", "--config", str(tiny_config), "--steps", "2"]) == 0


class TestConfigValidation:
    def test_unknown_top_level_key_rejected(self, tiny_config):
        raw = json.loads(tiny_config.read_text())
        raw["modle_m"] = raw["model_m"]
        with pytest.raises(ConfigError, match="modle_m"):
            RunConfig(raw)

    def test_unknown_train_key_rejected(self, tiny_config):
        raw = json.loads(tiny_config.read_text())
        raw["train"]["warmup_frac"] = 0.2  # typo
        with pytest.raises(ConfigError, match="warmup_frac"):
            RunConfig(raw)

    def test_unknown_alignment_key_rejected(self, tiny_config):
        raw = json.loads(tiny_config.read_text())
        raw["alignment"]["lambda"] = 0.5
        with pytest.raises(ConfigError, match="lambda"):
            RunConfig(raw)

    def test_env_var_overrides_output_dir(self, tiny_config, tmp_path, monkeypatch):
        monkeypatch.setenv("LET_LAB_OUT", str(tmp_path / "elsewhere"))
        cfg = load_config(tiny_config)
        assert cfg.output_dir == tmp_path / "elsewhere"

    def test_resolved_echo_contains_materialized_defaults(self, tiny_config):
        cfg = load_config(tiny_config)
        echo = cfg.resolved(cfg.train_config())
        assert echo["train"]["warmup_fraction"] == 0.10
        assert echo["train"]["adam_beta1"] == 0.9
        assert echo["data"]["entropy_rate"] > 0


class TestGenData:
    def test_writes_splits_and_manifest(self, tiny_config):
        assert main(["gen-data", "--config", str(tiny_config)]) == 0
        cfg = load_config(tiny_config)
        data_dir = cfg.output_dir / "data"
        train = read_token_file(data_dir / "train.tok")
        test = read_token_file(data_dir / "test.tok")
        assert len(train) + len(test) == 12_000
        assert len(test) == round(0.1 * 12_000)
        manifest = json.loads((data_dir / "manifest.json").read_text())
        assert manifest["vocab_size"] == 16
        assert manifest["entropy_rate_nats"] == pytest.approx(np.log(16), rel=1e-9)

    def test_rerun_is_byte_identical(self, tiny_config):
        cfg = load_config(tiny_config)
        assert main(["gen-data", "--config", str(tiny_config)]) == 0
        blobs = [(cfg.output_dir / "data" / n).read_bytes()
                 for n in ("train.tok", "test.tok", "manifest.json")]
        assert main(["gen-data", "--config", str(tiny_config)]) == 0
        again = [(cfg.output_dir / "data" / n).read_bytes()
                 for n in ("train.tok", "test.tok", "manifest.json")]
        assert blobs == again


class TestPretrainTeacher:
    def test_zero_steps_checkpoints_fresh_init(self, tiny_config):
        assert main(["pretrain-teacher", "--config", str(tiny_config),
                     "--steps", "0"]) == 0
        cfg = load_config(tiny_config)
        header, _ = load_checkpoint(cfg.output_dir / "teacher" / "checkpoint_final.bin")
        assert header["role"] == "teacher"
        assert header["step"] == 0

    def test_same_seed_bitwise_identical_checkpoints(self, tiny_config, tmp_path):
        cfg = load_config(tiny_config)
        assert main(["pretrain-teacher", "--config", str(tiny_config),
                     "--steps", "2"]) == 0
        first = (cfg.output_dir / "teacher" / "checkpoint_final.bin").read_bytes()
        shutil.rmtree(cfg.output_dir / "teacher")
        assert main(["pretrain-teacher", "--config", str(tiny_config),
                     "--steps", "2"]) == 0
        second = (cfg.output_dir / "teacher" / "checkpoint_final.bin").read_bytes()
        assert first == second


class TestTrain:
    def test_baseline_without_teacher_succeeds(self, tiny_config):
        assert main(["train", "--config", str(tiny_config), "--mode", "baseline"]) == 0

    def test_let_without_teacher_exits_2(self, tiny_config):
        assert main(["train", "--config", str(tiny_config), "--mode", "let"]) == 2

    def test_let_lambda_zero_matches_baseline_log(self, tiny_config, tmp_path):
        teacher_ready(tiny_config)
        raw = json.loads(tiny_config.read_text())
        raw["alignment"]["lambda0"] = 0.0
        zero_cfg = tiny_config.parent / "zero.json"
        zero_cfg.write_text(json.dumps(raw))
        assert main(["train", "--config", str(tiny_config), "--mode", "baseline"]) == 0
        assert main(["train", "--config", str(zero_cfg), "--mode", "let"]) == 0
        out = load_config(tiny_config).output_dir
        base = (out / "runs" / "baseline" / "metrics.jsonl").read_bytes()
        let0 = (out / "runs" / "let" / "metrics.jsonl").read_bytes()
        assert base == let0

    def test_run_dir_contains_reproducible_config_echo(self, tiny_config):
        assert main(["train", "--config", str(tiny_config), "--mode", "baseline"]) == 0
        out = load_config(tiny_config).output_dir
        echo = json.loads((out / "runs" / "baseline" / "config.json").read_text())
        assert echo["train"]["mode"] == "baseline"
        assert echo["train"]["total_steps"] == 4

    def test_eval_reports_ppl(self, tiny_config, capsys):
        assert main(["train", "--config", str(tiny_config), "--mode", "baseline"]) == 0
        out = load_config(tiny_config).output_dir
        ckpt = out / "runs" / "baseline" / "checkpoint_final.bin"
        assert main(["eval", "--config", str(tiny_config),
                     "--checkpoint", str(ckpt)]) == 0
        assert "test_ppl" in capsys.readouterr().out

    def test_eval_missing_checkpoint_exits_2(self, tiny_config):
        assert main(["eval", "--config", str(tiny_config),
                     "--checkpoint", "nowhere.bin"]) == 2


class TestAblate:
    @pytest.mark.parametrize("suite,expected", [
        ("layers", ["L2E", "L2L", "L2M", "M2E", "M2L", "M2M"]),
        ("lambda", ["lambda_0.01", "lambda_0.1", "lambda_0.3",
                    "lambda_1.0", "lambda_3.0"]),
        ("sstop", ["sstop_10pct", "sstop_20pct"]),
        ("layer-select", ["L1-F1", "L1-F3", "L1-F5", "L3-F3"]),
    ])
    def test_suite_grids(self, tiny_config, suite, expected):
        if suite == "layer-select":
            # L1-F5 targets layer 5 of M; L3-F3 counts 3 back on T
            raw = json.loads(tiny_config.read_text())
            raw["model_m"]["num_layers"] = 5
            raw["model_t"]["num_layers"] = 3
            tiny_config.write_text(json.dumps(raw))
        teacher_ready(tiny_config)
        assert main(["ablate", "--config", str(tiny_config), "--suite", suite]) == 0
        out = load_config(tiny_config).output_dir / f"ablate-{suite}"
        dirs = sorted(p.name for p in out.iterdir() if p.is_dir())
        assert dirs == sorted(expected)
        header = (out / "perplexity_vs_step.csv").read_text().splitlines()[0]
        assert header.split(",") == ["step"] + sorted(expected)
        assert (out / "similarity_vs_step.csv").exists()

    def test_resume_skips_completed_cells(self, tiny_config):
        teacher_ready(tiny_config)
        assert main(["ablate", "--config", str(tiny_config), "--suite", "sstop"]) == 0
        out = load_config(tiny_config).output_dir / "ablate-sstop"
        stamps = {p: p.stat().st_mtime_ns
                  for p in out.rglob("checkpoint_final.bin")}
        assert main(["ablate", "--config", str(tiny_config), "--suite", "sstop",
                     "--resume"]) == 0
        for p, ts in stamps.items():
            assert p.stat().st_mtime_ns == ts  # untouched: zero new steps

    def test_parallel_jobs_match_serial_grid(self, tiny_config, tmp_path, monkeypatch):
        teacher_ready(tiny_config)
        assert main(["ablate", "--config", str(tiny_config), "--suite", "sstop"]) == 0
        serial_dir = load_config(tiny_config).output_dir / "ablate-sstop"
        serial = {p.name: (p / "metrics.jsonl").read_bytes()
                  for p in serial_dir.iterdir() if p.is_dir()}

        monkeypatch.setenv("LET_LAB_OUT", str(tmp_path / "par"))
        teacher_ready(tiny_config)
        assert main(["ablate", "--config", str(tiny_config), "--suite", "sstop",
                     "--jobs", "2"]) == 0
        par_dir = tmp_path / "par" / "ablate-sstop"
        for name, blob in serial.items():
            assert (par_dir / name / "metrics.jsonl").read_bytes() == blob

    def test_missing_teacher_exits_2(self, tiny_config):
        assert main(["ablate", "--config", str(tiny_config), "--suite", "layers"]) == 2

    def test_bad_suite_exits_64(self, tiny_config):
        assert main(["ablate", "--config", str(tiny_config), "--suite", "bogus"]) == 64


class TestVerifyTheory:
    def test_defaults_pass(self, tmp_path):
        out = tmp_path / "vt"
        assert main(["verify-theory", "--trials", "2", "--out", str(out)]) == 0
        summary = json.loads((out / "summary.json").read_text())
        assert summary["passed"] is True

    def test_k_zero_is_usage_error(self, tmp_path):
        assert main(["verify-theory", "--k-list", "0",
                     "--out", str(tmp_path)]) == 64

    def test_guard_violation_exits_2(self, tmp_path):
        assert main(["verify-theory", "--L", "5", "--d", "10",
                     "--out", str(tmp_path)]) == 2

    def test_single_trial_reproducible(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["verify-theory", "--trials", "1", "--seed", "5",
                     "--out", str(a)]) == 0
        assert main(["verify-theory", "--trials", "1", "--seed", "5",
                     "--out", str(b)]) == 0
        assert (a / "curvature_sweep.csv").read_bytes() == \
            (b / "curvature_sweep.csv").read_bytes()


class TestGradcheckCommand:
    def test_primitives_scope_passes(self, capsys):
        assert main(["gradcheck", "--scope", "primitives", "--seeds", "2"]) == 0
        out = capsys.readouterr().out
        assert out.count("PASS") >= 16

    def test_losses_scope_covers_all_losses(self, capsys):
        assert main(["gradcheck", "--scope", "losses", "--seeds", "2"]) == 0
        out = capsys.readouterr().out
        for name in ("nll", "rkd", "proj_cosine", "total_composite", "proj_logsum"):
            assert name in out

    def test_repeated_invocation_identical_report(self, capsys):
        assert main(["gradcheck", "--scope", "losses", "--seeds", "2"]) == 0
        first = capsys.readouterr().out
        assert main(["gradcheck", "--scope", "losses", "--seeds", "2"]) == 0
        assert capsys.readouterr().out == first

    def test_bad_scope_exits_64(self):
        assert main(["gradcheck", "--scope", "everything"]) == 64


def test_unknown_command_exits_64():
    assert main(["frobnicate"]) == 64


def test_train_rerun_fresh_dir_byte_identical(tiny_config, tmp_path, monkeypatch):
    """Determinism contract: same config into fresh dirs, identical bytes."""
    blobs = []
    for name in ("first", "second"):
        monkeypatch.setenv("LET_LAB_OUT", str(tmp_path / name))
        assert main(["train", "--config", str(tiny_config), "--mode", "baseline"]) == 0
        run_dir = tmp_path / name / "runs" / "baseline"
        blobs.append((
            (run_dir / "metrics.jsonl").read_bytes(),
            (run_dir / "checkpoint_final.bin").read_bytes(),
            (run_dir / "config.json").read_text().replace(name, "X"),
        ))
    assert blobs[0][0] == blobs[1][0]
    assert blobs[0][1] == blobs[1][1]
    assert blobs[0][2] == blobs[1][2]

import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from cmcl.cli import main
from cmcl.config import (
    SCENARIO_PRESETS,
    apply_overrides,
    load_run_config,
    parse_run_config,
    preset_run_config,
    run_config_to_dict,
)
from cmcl.data import dataset_read, dataset_write, generate_scenario, split_train_val
from cmcl.errors import ConfigError
from cmcl.experiment import erm_degenerate, load_run_result, run_benchmark, run_training
from cmcl.model import checkpoint_load, top1_accuracy


def small_config_doc(out_dir):
    return {
        "schema_version": 1,
        "scenario": {
            "kind": "spurious-feature",
            "name": "toy",
            "n_source": 2,
            "class_count": 2,
            "samples_per_domain": 200,
            "input_dim": 4,
            "domain_params": [0.9, 0.5],
            "unseen_param": -0.8,
            "hull": "extrapolated",
            "noise_scale": 1.0,
        },
        "model": {"hidden_dims": [], "feature_dim": 4},
        "train": {
            "outer_iters": 3,
            "stage_b_iters": 2,
            "stage_c_iters": 2,
            "batch_size": 16,
            "ema_alpha": 0.05,
            "extractor_optimizer": {"kind": "adamw", "lr": 0.01, "weight_decay": 5e-4},
            "classifier_optimizer": {"kind": "adamw", "lr": 0.01, "weight_decay": 5e-4},
        },
        "eval_every": 1,
        "out_dir": str(out_dir),
        "seeds": [0],
    }


def write_config(tmp_path, doc=None):
    doc = doc if doc is not None else small_config_doc(tmp_path / "runs")
    path = tmp_path / "config.json"
    path.write_text(json.dumps(doc), encoding="utf-8")
    return path


class TestConfigParsing:
    def test_roundtrip_through_dict(self, tmp_path):
        cfg = parse_run_config(small_config_doc(tmp_path))
        again = parse_run_config(run_config_to_dict(cfg))
        assert again == cfg

    def test_missing_required_field_named(self, tmp_path):
        doc = small_config_doc(tmp_path)
        del doc["train"]["outer_iters"]
        with pytest.raises(ConfigError, match="train.outer_iters"):
            parse_run_config(doc)

    def test_unknown_field_named(self, tmp_path):
        doc = small_config_doc(tmp_path)
        doc["scenario"]["n_sources"] = 3
        with pytest.raises(ConfigError, match="n_sources"):
            parse_run_config(doc)

    def test_wrong_type_named(self, tmp_path):
        doc = small_config_doc(tmp_path)
        doc["train"]["batch_size"] = "lots"
        with pytest.raises(ConfigError, match="train.batch_size"):
            parse_run_config(doc)

    def test_schema_version_checked(self, tmp_path):
        doc = small_config_doc(tmp_path)
        doc["schema_version"] = 2
        with pytest.raises(ConfigError, match="schema_version"):
            parse_run_config(doc)

    def test_parse_error_reports_line(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{\n  "schema_version": 1,\n  oops\n}', encoding="utf-8")
        with pytest.raises(ConfigError, match="line 3"):
            load_run_config(path)

    def test_overrides_dotted_paths(self, tmp_path):
        doc = small_config_doc(tmp_path)
        out = apply_overrides(doc, ["train.outer_iters=7", "seeds=[1,2]", "scenario.name=two"])
        assert out["train"]["outer_iters"] == 7
        assert out["seeds"] == [1, 2]
        assert out["scenario"]["name"] == "two"
        assert doc["train"]["outer_iters"] == 3  # original untouched

    def test_presets_parse(self):
        for name in SCENARIO_PRESETS:
            cfg = preset_run_config(name)
            cfg.validate()


class TestRunTraining:
    def test_outputs_written(self, tmp_path):
        cfg = parse_run_config(small_config_doc(tmp_path / "runs"))
        out = run_training(cfg, 0, tmp_path / "runs", figures=True)
        d = out.out_dir
        assert (d / "metrics.csv").exists()
        assert (d / "checkpoint.bin").exists()
        assert (d / "summary.json").exists()
        assert (d / "losses.png").exists()
        assert (d / "validation.png").exists()
        summary = json.loads((d / "summary.json").read_text())
        assert summary["seed"] == 0
        assert summary["steps"] == len(out.result.metrics)

    def test_rerun_is_byte_identical(self, tmp_path):
        cfg = parse_run_config(small_config_doc(tmp_path / "runs"))
        run_training(cfg, 0, tmp_path / "a", figures=False)
        run_training(cfg, 0, tmp_path / "b", figures=False)
        h = lambda p: hashlib.sha256(p.read_bytes()).hexdigest()
        assert h(tmp_path / "a/seed0/metrics.csv") == h(tmp_path / "b/seed0/metrics.csv")
        assert h(tmp_path / "a/seed0/checkpoint.bin") == h(tmp_path / "b/seed0/checkpoint.bin")

    def test_eval_matches_trainer_internal_validation(self, tmp_path):
        cfg = parse_run_config(small_config_doc(tmp_path / "runs"))
        out = run_training(cfg, 0, tmp_path / "runs", figures=False)
        model, ema = checkpoint_load(out.out_dir / "checkpoint.bin")
        accs = [
            top1_accuracy(ema.extractor, ema.global_classifier, ds.x, ds.y)
            for ds in out.val_sets
        ]
        assert abs(float(np.mean(accs)) - out.summary["best_val_acc_target"]) <= 1e-12
        # a converged toy run clears the chance level on its own validation data
        assert out.summary["best_val_acc_target"] > 1.0 / 2


class TestErmDegenerate:
    def test_equivalence_knobs(self, tmp_path):
        cfg = parse_run_config(small_config_doc(tmp_path))
        erm = erm_degenerate(cfg)
        assert erm.train.lambda_mean == 0.0
        assert erm.train.lambda_cov == 0.0
        assert erm.train.stage_b_iters == 0
        assert erm.train.stage_c_iters == 0
        steps = cfg.train.stage_a_iters + cfg.train.stage_b_iters + cfg.train.stage_c_iters
        assert erm.train.outer_iters == cfg.train.outer_iters * steps


class TestBenchmark:
    def test_rows_and_aggregates(self, tmp_path):
        cfg = parse_run_config(small_config_doc(tmp_path / "runs"))
        result = run_benchmark(cfg, seeds=[0, 1], out_root=tmp_path / "bench", figures=True)
        assert len(result.rows) == 2 * 2 * 1  # seeds x methods x held-out domains
        methods = {r.method for r in result.rows}
        assert methods == {"cmcl", "erm"}
        for method in methods:
            accs = [r.acc_target for r in result.rows if r.method == method]
            assert abs(result.aggregates[method]["mean_acc_target"] - np.mean(accs)) <= 1e-12
        assert (tmp_path / "bench/benchmark_result.json").exists()
        assert (tmp_path / "bench/benchmark_table.csv").exists()
        assert (tmp_path / "bench/benchmark_accuracy.png").exists()

    def test_result_roundtrip_self_check(self, tmp_path):
        cfg = parse_run_config(small_config_doc(tmp_path / "runs"))
        run_benchmark(cfg, seeds=[0], out_root=tmp_path / "bench", figures=False)
        path = tmp_path / "bench/benchmark_result.json"
        loaded = load_run_result(path)
        assert loaded.scenario == cfg.scenario.name
        doc = json.loads(path.read_text())
        doc["aggregates"]["cmcl"]["mean_acc_target"] += 0.25
        path.write_text(json.dumps(doc))
        from cmcl.errors import FormatError

        with pytest.raises(FormatError, match="mean_acc_target"):
            load_run_result(path)


class TestCli:
    def test_train_writes_outputs_and_returns_zero(self, tmp_path):
        cfg_path = write_config(tmp_path)
        rc = main(["train", "--config", str(cfg_path), "--no-figures"])
        assert rc == 0
        assert (tmp_path / "runs/seed0/metrics.csv").exists()

    def test_train_rerun_byte_identical_metrics(self, tmp_path):
        cfg_path = write_config(tmp_path)
        assert main(["train", "--config", str(cfg_path), "--out", str(tmp_path / "a"), "--no-figures"]) == 0
        assert main(["train", "--config", str(cfg_path), "--out", str(tmp_path / "b"), "--no-figures"]) == 0
        a = (tmp_path / "a/seed0/metrics.csv").read_bytes()
        b = (tmp_path / "b/seed0/metrics.csv").read_bytes()
        assert a == b

    def test_train_zero_iters_writes_header_only(self, tmp_path):
        doc = small_config_doc(tmp_path / "runs")
        doc["train"]["outer_iters"] = 0
        cfg_path = write_config(tmp_path, doc)
        assert main(["train", "--config", str(cfg_path), "--no-figures"]) == 0
        text = (tmp_path / "runs/seed0/metrics.csv").read_text()
        lines = text.splitlines()
        assert len(lines) == 1
        assert lines[0].startswith("outer_iter,stage,inner_iter")

    def test_missing_field_exits_2_named(self, tmp_path, capsys):
        doc = small_config_doc(tmp_path)
        del doc["train"]["outer_iters"]
        cfg_path = write_config(tmp_path, doc)
        assert main(["train", "--config", str(cfg_path)]) == 2
        assert "train.outer_iters" in capsys.readouterr().err

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")  # deliberate blow-up
    def test_numeric_failure_exits_3(self, tmp_path, capsys):
        doc = small_config_doc(tmp_path / "runs")
        doc["train"]["extractor_optimizer"] = {"kind": "sgd", "lr": 1e12, "momentum": 0.9}
        doc["train"]["outer_iters"] = 5
        cfg_path = write_config(tmp_path, doc)
        assert main(["train", "--config", str(cfg_path), "--no-figures"]) == 3
        assert "outer_iter" in capsys.readouterr().err

    def test_eval_reports_accuracy_matching_loop_oracle(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path)
        assert main(["train", "--config", str(cfg_path), "--no-figures"]) == 0
        capsys.readouterr()
        cfg = load_run_config(cfg_path)
        spec = cfg.scenario.with_seed(0)
        unseen = generate_scenario(spec)[-1]
        ds_path = tmp_path / "unseen.cmds"
        dataset_write(unseen, ds_path)
        ckpt = tmp_path / "runs/seed0/checkpoint.bin"
        assert main(["eval", "--checkpoint", str(ckpt), "--dataset", str(ds_path)]) == 0
        out = capsys.readouterr().out
        model, ema = checkpoint_load(ckpt)
        z = ema.extractor.forward_array(unseen.x)
        scores = z @ ema.global_classifier.W.value.T
        correct = sum(int(np.argmax(scores[i])) == unseen.y[i] for i in range(len(unseen)))
        assert f"{correct / len(unseen):.6f}" in out

    def test_eval_shape_mismatch_exits_2(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path)
        assert main(["train", "--config", str(cfg_path), "--no-figures"]) == 0
        rng = np.random.default_rng(0)
        from cmcl.data import DomainDataset

        bad = DomainDataset("bad", rng.normal(size=(10, 9)), np.arange(10) % 2, 2)
        ds_path = tmp_path / "bad.cmds"
        dataset_write(bad, ds_path)
        ckpt = tmp_path / "runs/seed0/checkpoint.bin"
        assert main(["eval", "--checkpoint", str(ckpt), "--dataset", str(ds_path)]) == 2

    def test_gradcheck_quick_passes(self, capsys):
        assert main(["gradcheck", "--configs", "2"]) == 0
        out = capsys.readouterr().out
        assert "overall: PASS" in out
        for name in ("loss_ce", "loss_mm", "loss_dsc", "loss_cdl", "loss_cemm"):
            assert name in out
        # one max-relative-error figure per loss line
        assert out.count("max_rel_error=") == 7

    def test_gradcheck_fault_injection_fails_with_named_loss(self, capsys, monkeypatch):
        import cmcl.verification as verification

        real = verification.loss_dsc

        def corrupted(model, batches):
            from cmcl import autodiff as ad

            node = real(model, batches)
            return ad.Node(
                node.value * 1.0,
                parents=(node,),
                vjp=lambda g: (1.5 * g,),
                requires_grad=True,
            )

        monkeypatch.setattr(verification, "loss_dsc", corrupted)
        assert main(["gradcheck", "--configs", "2"]) == 1
        out = capsys.readouterr().out
        assert "loss_dsc" in out
        assert "FAIL" in out

    def test_gen_data_roundtrips(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path)
        out_dir = tmp_path / "data"
        assert main(["gen-data", "--config", str(cfg_path), "--out", str(out_dir)]) == 0
        files = sorted(p.name for p in out_dir.glob("*.cmds"))
        assert files == ["source0.cmds", "source1.cmds", "unseen.cmds"]
        ds = dataset_read(out_dir / "source0.cmds")
        assert len(ds) == 200
        assert (out_dir / "scenario.json").exists()

    def test_benchmark_via_cli(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path)
        rc = main([
            "benchmark", "--config", str(cfg_path), "--seeds", "0",
            "--out", str(tmp_path / "bench"), "--no-figures",
        ])
        assert rc == 0
        out = capsys.readouterr().out
        assert "cmcl" in out and "erm" in out
        assert (tmp_path / "bench/benchmark_result.json").exists()

    def test_unknown_preset_exits_2(self, capsys):
        assert main(["benchmark", "--scenario", "never-heard-of-it"]) == 2
        assert "unknown preset" in capsys.readouterr().err

    def test_module_entrypoint_smoke(self, tmp_path):
        proc = subprocess.run(
            [sys.executable, "-m", "cmcl", "gradcheck", "--configs", "1"],
            capture_output=True,
            text=True,
            timeout=300,
        )
        assert proc.returncode == 0, proc.stderr
        assert "overall: PASS" in proc.stdout

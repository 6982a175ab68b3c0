"""CLI contract: subcommands, exit codes, flag overrides, persisted configs."""

import json

from antitransfer.cli import main
from antitransfer.config import DataConfig, ExperimentConfig
from antitransfer.data import read_manifest
from antitransfer.synth import SynthSpec
from antitransfer.training import TrainConfig


def write_config(tmp_path, out_name="run", strategy="scratch", checkpoints=(),
                 label_field="target", data_dir=None):
    if data_dir is None:
        data = DataConfig(kind="synth",
                          synth=SynthSpec(samples_per_split=(24, 8, 8),
                                          image_size=(16, 17), seed=5))
    else:
        data = DataConfig(kind="manifest_dir", path=str(data_dir))
    cfg = ExperimentConfig(
        train=TrainConfig(strategy=strategy, seed=3, max_epochs=2,
                          arch_preset="vgg-tiny", label_field=label_field,
                          pretrained_checkpoints=tuple(map(str, checkpoints))),
        data=data,
        output_dir=str(tmp_path / out_name))
    path = tmp_path / "config.json"
    cfg.save(path)
    return path


class TestTrainCommand:
    def test_scratch_run_writes_artifacts(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        assert main(["train", "--config", str(cfg)]) == 0
        out = tmp_path / "run"
        for name in ("config.json", "metrics.csv", "summary.json", "model.atck"):
            assert (out / name).exists(), name
        echoed = json.loads((out / "config.json").read_text())
        assert echoed["train"]["strategy"] == "scratch"
        assert echoed["train"]["lr"] == 0.0005      # defaults are persisted

    def test_rerun_same_config_gives_identical_summary(self, tmp_path):
        cfg = write_config(tmp_path)
        assert main(["train", "--config", str(cfg)]) == 0
        first = json.loads((tmp_path / "run" / "summary.json").read_text())
        assert main(["train", "--config", str(cfg)]) == 0
        second = json.loads((tmp_path / "run" / "summary.json").read_text())
        assert first["test_accuracy"] == second["test_accuracy"]
        assert first["best_epoch"] == second["best_epoch"]

    def test_at_strategy_with_flags(self, tmp_path, orth_checkpoint,
                                    tiny_data_dir):
        cfg = write_config(tmp_path, data_dir=tiny_data_dir)
        code = main(["train", "--config", str(cfg), "--strategy", "at",
                     "--checkpoint", str(orth_checkpoint),
                     "--at-layer", "2", "--beta", "1.0",
                     "--similarity", "squared_cosine",
                     "--aggregation", "gram"])
        assert code == 0
        echoed = json.loads((tmp_path / "run" / "config.json").read_text())
        assert echoed["train"]["strategy"] == "at"
        assert echoed["train"]["at"]["layers"] == [2]

    def test_negative_beta_rejected(self, tmp_path, orth_checkpoint,
                                    tiny_data_dir):
        cfg = write_config(tmp_path, data_dir=tiny_data_dir)
        code = main(["train", "--config", str(cfg), "--strategy", "at",
                     "--checkpoint", str(orth_checkpoint), "--beta", "-1"])
        assert code == 2

    def test_malformed_config_exits_2_with_line(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text('{\n  "train": {},\n')
        assert main(["train", "--config", str(path)]) == 2
        err = capsys.readouterr().err
        assert ":3:" in err or ":2:" in err

    def test_unknown_key_exits_2(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"train": {"nope": 1}, "data": {
            "kind": "synth", "synth": {}}, "output_dir": "x"}))
        assert main(["train", "--config", str(path)]) == 2

    def test_missing_checkpoint_is_runtime_error(self, tmp_path, tiny_data_dir):
        cfg = write_config(tmp_path, data_dir=tiny_data_dir)
        code = main(["train", "--config", str(cfg), "--strategy", "at",
                     "--checkpoint", str(tmp_path / "missing.atck")])
        assert code == 3

    def test_dual_at_runs_both_stages(self, tmp_path, orth_checkpoint,
                                      tiny_data_dir):
        cfg = write_config(tmp_path, data_dir=tiny_data_dir)
        code = main(["train", "--config", str(cfg), "--strategy", "dual-at",
                     "--checkpoint", str(orth_checkpoint),
                     "--checkpoint", str(orth_checkpoint), "--at-layer", "1"])
        assert code == 0
        assert (tmp_path / "run" / "intermediate" / "model.atck").exists()
        assert (tmp_path / "run" / "final_init.atck").exists()


class TestPretrainCommand:
    def test_pretrain_writes_checkpoint(self, tmp_path, orth_data_dir):
        cfg = write_config(tmp_path, label_field="orth1", data_dir=orth_data_dir)
        assert main(["pretrain", "--config", str(cfg)]) == 0
        assert (tmp_path / "run" / "model.atck").exists()
        assert (tmp_path / "run" / "metrics.csv").exists()

    def test_rerun_identical_summary(self, tmp_path, orth_data_dir):
        cfg = write_config(tmp_path, label_field="orth1", data_dir=orth_data_dir)
        main(["pretrain", "--config", str(cfg)])
        first = (tmp_path / "run" / "summary.json").read_text()
        main(["pretrain", "--config", str(cfg)])
        assert (tmp_path / "run" / "summary.json").read_text() == first


class TestSweepCommand:
    def test_layer_sweep_emits_rows(self, tmp_path, orth_checkpoint,
                                    tiny_data_dir, capsys):
        cfg = write_config(tmp_path, strategy="at",
                           checkpoints=(orth_checkpoint,),
                           data_dir=tiny_data_dir)
        assert main(["sweep", "--config", str(cfg), "--layers", "1..2"]) == 0
        lines = (tmp_path / "run" / "sweep.csv").read_text().strip().splitlines()
        assert len(lines) == 3   # header + 2 layers
        assert "best" in lines[0]

    def test_beta_sweep_includes_value_one(self, tmp_path, orth_checkpoint,
                                           tiny_data_dir):
        cfg = write_config(tmp_path, strategy="at",
                           checkpoints=(orth_checkpoint,),
                           data_dir=tiny_data_dir)
        assert main(["sweep", "--config", str(cfg), "--betas", "0.5,1"]) == 0
        body = (tmp_path / "run" / "sweep.csv").read_text()
        assert "\n1.0," in body

    def test_empty_grid_exits_2(self, tmp_path, orth_checkpoint, tiny_data_dir):
        cfg = write_config(tmp_path, strategy="at",
                           checkpoints=(orth_checkpoint,),
                           data_dir=tiny_data_dir)
        assert main(["sweep", "--config", str(cfg), "--layers", ""]) == 2

    def test_needs_exactly_one_grid(self, tmp_path, orth_checkpoint,
                                    tiny_data_dir):
        cfg = write_config(tmp_path, strategy="at",
                           checkpoints=(orth_checkpoint,),
                           data_dir=tiny_data_dir)
        assert main(["sweep", "--config", str(cfg)]) == 2
        assert main(["sweep", "--config", str(cfg), "--layers", "1..2",
                     "--betas", "1"]) == 2

    def test_parallel_jobs_match_sequential(self, tmp_path, orth_checkpoint,
                                            tiny_data_dir):
        cfg = write_config(tmp_path, strategy="at",
                           checkpoints=(orth_checkpoint,),
                           data_dir=tiny_data_dir)
        assert main(["sweep", "--config", str(cfg), "--layers", "1..2",
                     "--out", str(tmp_path / "seq")]) == 0
        assert main(["sweep", "--config", str(cfg), "--layers", "1..2",
                     "--jobs", "2", "--out", str(tmp_path / "par")]) == 0
        seq = (tmp_path / "seq" / "sweep.csv").read_text()
        par = (tmp_path / "par" / "sweep.csv").read_text()
        assert seq == par


class TestGradcheckCommand:
    def test_fresh_checkout_passes(self, capsys):
        assert main(["gradcheck"]) == 0
        out = capsys.readouterr().out
        assert "[pass]" in out and "[FAIL]" not in out
        assert "max relative error" in out

    def test_injected_sign_flip_fails(self, capsys):
        assert main(["gradcheck", "--flip-at-sign"]) == 1
        assert "[FAIL]" in capsys.readouterr().out


class TestGradcamCommand:
    def test_end_to_end_pgms(self, tmp_path, orth_checkpoint, tiny_data_dir):
        rows = read_manifest(tiny_data_dir / "test_manifest.csv")
        sample = tiny_data_dir / rows[0].path
        out = tmp_path / "cam"
        code = main(["gradcam", "--checkpoint", str(orth_checkpoint),
                     "--input", str(sample), "--layer", "1", "--class", "0",
                     "--out", str(out), "--csv"])
        assert code == 0
        assert out.with_suffix(".spec.pgm").exists()
        assert out.with_suffix(".heat.pgm").exists()
        assert out.with_suffix(".overlay.pgm").exists()
        assert out.with_suffix(".heat.csv").exists()

    def test_bad_layer_is_runtime_error(self, tmp_path, orth_checkpoint,
                                        tiny_data_dir):
        rows = read_manifest(tiny_data_dir / "test_manifest.csv")
        sample = tiny_data_dir / rows[0].path
        code = main(["gradcam", "--checkpoint", str(orth_checkpoint),
                     "--input", str(sample), "--layer", "9", "--class", "0",
                     "--out", str(tmp_path / "cam")])
        assert code == 3


class TestEstimateMemoryCommand:
    def test_human_readable(self, capsys):
        code = main(["estimate-memory", "--arch", "vgg16", "--batch", "1",
                     "--at-layer", "1", "--input-size", "126x129"])
        assert code == 0
        out = capsys.readouterr().out
        assert "1,040,256" in out          # batch * 64 * 126 * 129
        assert "4,096" in out              # 64^2

    def test_json_output(self, capsys):
        code = main(["estimate-memory", "--arch", "vgg16", "--batch", "13",
                     "--at-layer", "1", "--at-layer", "13",
                     "--input-size", "126x129", "--json"])
        assert code == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["per_layer"]["1"]["gram_elems"] == 13 * 64 * 64
        assert payload["per_layer"]["13"]["feature_elems"] == 13 * 512 * 7 * 8

    def test_bad_input_size_exits_2(self):
        assert main(["estimate-memory", "--arch", "vgg16", "--batch", "1",
                     "--at-layer", "1", "--input-size", "banana"]) == 2

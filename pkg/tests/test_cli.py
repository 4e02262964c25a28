import json

import numpy as np
import pytest

from msaff import cli
from msaff.cli import load_configs, main
from msaff.config import preset
from msaff.datakit import SyntheticSpec, generate_synthetic, load_dataset, save_dataset
from msaff.model import MSAFF
from msaff.numerics.checkpoint import load_checkpoint, save_checkpoint
from msaff.training import read_log

SPEC = {"kind": "synthetic", "identities": 4, "sequences_per_identity": 3, "frames": 6, "noise": 0.02,
        "height": 16, "width": 12}
CONFIG = {"model": {"preset": "micro"},
          "training": {"p": 4, "k": 2, "frames": 4, "base_lr": 5e-4, "milestones": [3], "checkpoint_every": 2}}


@pytest.fixture(scope="module")
def files(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "spec.json").write_text(json.dumps(SPEC))
    (root / "cfg.json").write_text(json.dumps(CONFIG))
    return root


@pytest.fixture(scope="module")
def trained(files):
    out = files / "run"
    assert main(["train", "--config", str(files / "cfg.json"), "--data", str(files / "spec.json"),
                 "--out", str(out), "--max-iterations", "4"]) == 0
    return out


def args(files, command, out, *extra):
    return [command, "--config", str(files / "cfg.json"), "--data", str(files / "spec.json"), "--out", str(out),
            *extra]


class TestTrain:
    def test_zero_iterations_writes_snapshot_only(self, files, tmp_path):
        assert main(args(files, "train", tmp_path / "r", "--max-iterations", "0")) == 0
        assert sorted(p.name for p in (tmp_path / "r").iterdir()) == ["config.json"]

    def test_log_and_checkpoints(self, trained):
        rows = read_log(trained / "train_log.csv")
        assert [r["iteration"] for r in rows] == [0, 1, 2, 3]
        assert all(np.isfinite(r["loss"]) for r in rows)
        # milestone at iteration 3: exactly one x0.1 step
        assert rows[3]["lr"] == rows[2]["lr"] * 0.1
        for name in ("ckpt_0000002.bin", "ckpt_0000004.bin", "final.bin"):
            assert (trained / name).exists()
        assert load_checkpoint(trained / "final.bin")[1]["iteration"] == 4

    def test_snapshot_reproduces_the_run(self, files, trained, tmp_path):
        snap = json.loads((trained / "config.json").read_text())
        assert snap["command"] == "train" and snap["data"]["kind"] == "synthetic"
        cfg, tcfg = load_configs(trained / "config.json")
        assert cfg.to_dict() == snap["model"] and tcfg.to_dict() == snap["training"]
        (tmp_path / "spec.json").write_text(json.dumps(snap["data"]))
        assert main(["train", "--config", str(trained / "config.json"), "--data", str(tmp_path / "spec.json"),
                     "--out", str(tmp_path / "again"), "--max-iterations", "4"]) == 0
        assert (tmp_path / "again" / "train_log.csv").read_bytes() == (trained / "train_log.csv").read_bytes()

    def test_existing_output_is_refused(self, files, trained):
        assert main(args(files, "train", trained, "--max-iterations", "0")) == 1

    def test_non_finite_weights_exit_2_and_leave_no_directory(self, files, tmp_path):
        model = MSAFF(preset("micro"))
        state = model.state_dict()
        state["affm_st.fc_b"][0, 0] = np.inf
        save_checkpoint(tmp_path / "bad.bin", state)
        out = tmp_path / "r"
        assert main(args(files, "train", out, "--max-iterations", "2", "--checkpoint", str(tmp_path / "bad.bin"))) == 2
        assert not out.exists()
        assert [p.name for p in tmp_path.iterdir()] == ["bad.bin"]

    def test_too_few_identities_is_a_data_error(self, files, tmp_path):
        cfg = json.loads(json.dumps(CONFIG))
        cfg["training"]["p"] = 5
        (tmp_path / "cfg.json").write_text(json.dumps(cfg))
        assert main(["train", "--config", str(tmp_path / "cfg.json"), "--data", str(files / "spec.json"),
                     "--out", str(tmp_path / "r"), "--max-iterations", "1"]) == 1


class TestEval:
    def test_report_fields(self, files, trained, tmp_path):
        assert main(args(files, "eval", tmp_path / "e", "--checkpoint", str(trained / "final.bin"))) == 0
        report = json.loads((tmp_path / "e" / "report.json").read_text())
        assert report["schema_version"] == 1
        assert set(report["rank"]) == {"1", "5", "10", "20"}
        assert report["embedding_shape"] == [87, 8] and report["op"] is None
        assert report["probes"] == 4 and report["gallery"] == 8
        text = (tmp_path / "e" / "report.txt").read_text()
        assert f"{100 * report['mAP']:8.2f}" in text

    def test_reports_are_byte_identical(self, files, trained, tmp_path):
        for name in ("a", "b"):
            assert main(args(files, "eval", tmp_path / name, "--checkpoint", str(trained / "final.bin"),
                             "--op", "2")) == 0
        assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()

    def test_op_changes_recorded_dimension(self, files, trained, tmp_path):
        dims = {}
        for op in ("4", None):
            out = tmp_path / f"op{op}"
            extra = ["--op", op] if op else []
            assert main(args(files, "eval", out, "--checkpoint", str(trained / "final.bin"), *extra)) == 0
            dims[op] = json.loads((out / "report.json").read_text())["embedding_dim"]
        assert dims == {"4": 87 * 4, None: 87 * 8}

    def test_bad_op_fails_before_model_work(self, files, trained, tmp_path, monkeypatch):
        def boom(*a, **k):
            raise AssertionError("model built")

        monkeypatch.setattr(cli, "build_model", boom)
        monkeypatch.setattr(cli, "load_data", boom)
        assert main(args(files, "eval", tmp_path / "e", "--checkpoint", str(trained / "final.bin"), "--op", "3")) == 1
        assert not (tmp_path / "e").exists()

    def test_unknown_pool_mode(self, files, trained, tmp_path):
        assert main(args(files, "eval", tmp_path / "e", "--checkpoint", str(trained / "final.bin"), "--op", "2",
                         "--pool-mode", "mode")) == 1

    def test_trivial_split_gives_rank1_one(self, files, trained, tmp_path):
        (tmp_path / "spec.json").write_text(json.dumps(dict(SPEC, probe_conditions=[])))
        assert main(["eval", "--config", str(files / "cfg.json"), "--data", str(tmp_path / "spec.json"),
                     "--out", str(tmp_path / "e"), "--checkpoint", str(trained / "final.bin")]) == 0
        assert json.loads((tmp_path / "e" / "report.json").read_text())["rank"]["1"] == 1.0

    def test_incompatible_checkpoint(self, files, tmp_path):
        save_checkpoint(tmp_path / "w.bin", MSAFF(preset("micro", out_channels=16)).state_dict())
        assert main(args(files, "eval", tmp_path / "e", "--checkpoint", str(tmp_path / "w.bin"))) == 1

    @pytest.mark.slow
    def test_casia_b_op1_records_339(self, tmp_path):
        # two views so the cross-view exclusion leaves admissible pairs
        samples = []
        for view in ("000", "090"):
            samples += generate_synthetic(SyntheticSpec(identities=2, sequences_per_identity=2, frames=4,
                                                        view=view))[0]
        manifest = save_dataset(samples, tmp_path / "data", probe_conditions=["nm-02"])
        (tmp_path / "cfg.json").write_text(json.dumps({"preset": "casia_b"}))
        save_checkpoint(tmp_path / "w.bin", MSAFF(preset("casia_b")).state_dict())
        assert main(["eval", "--config", str(tmp_path / "cfg.json"), "--data", str(manifest),
                     "--out", str(tmp_path / "e"), "--checkpoint", str(tmp_path / "w.bin"), "--op", "1"]) == 0
        report = json.loads((tmp_path / "e" / "report.json").read_text())
        assert report["embedding_dim"] == 339 and report["embedding_shape"] == [339, 1]
        assert set(report["cross_view"]["nm-02"]) == {"000", "090", "mean"}


class TestAblation:
    @pytest.fixture(scope="class")
    @classmethod
    def report(cls, files, trained, tmp_path_factory):
        out = tmp_path_factory.mktemp("ab") / "run"
        assert main(args(files, "ablate-fdpool", out, "--checkpoint", str(trained / "final.bin"))) == 0
        return json.loads((out / "ablation.json").read_text()), (out / "ablation.txt").read_text()

    def test_grid_has_29_rows(self, report):
        grid = report[0]["grid"]
        assert len(grid) == 29
        assert {(r["mode"], r["op"]) for r in grid[:-1]} == {(m, op) for m in cli.POOL_MODES for op in (1, 2, 4, 8)}
        assert grid[-1]["op"] is None

    def test_full_width_average_equals_baseline(self, report):
        doc = report[0]
        base = doc["grid"][-1]["rank1"]
        assert doc["average_full_width_rank1"] == base
        # micro Out_c is 8, so the op=8 average cell is the identity pooling
        assert next(r for r in doc["grid"] if r["mode"] == "average" and r["op"] == 8)["rank1"] == base

    def test_text_table(self, report):
        lines = report[1].splitlines()
        assert len(lines) == 9 and lines[1].startswith("average ")


class TestGradcheck:
    def test_pass_writes_table(self, tmp_path, capsys):
        assert main(["gradcheck", "--components", "training,affm", "--out", str(tmp_path / "g")]) == 0
        doc = json.loads((tmp_path / "g" / "gradcheck.json").read_text())
        assert [c["name"] for c in doc["checks"]] == ["ba_triplet_loss", "affm.fuse"]
        assert "2 checks, 0 failed" in capsys.readouterr().out

    def test_corrupted_row_fails(self, capsys):
        assert main(["gradcheck", "--components", "training", "--corrupt", "ba_triplet_loss=0.5"]) == 2
        out = capsys.readouterr().out
        assert "FAIL" in out and "1 checks, 1 failed" in out

    def test_unknown_component(self):
        assert main(["gradcheck", "--components", "nope"]) == 1


class TestGenerate:
    def test_manifest_round_trip(self, files, tmp_path):
        assert main(["generate", "--data", str(files / "spec.json"), "--out", str(tmp_path / "d"), "--seed", "3"]) == 0
        ds = load_dataset(tmp_path / "d" / "manifest.json")
        assert len(ds) == 12 and ds.probe_conditions == ["nm-03"]
        assert ds[0].silhouettes.shape == (6, 16, 12)
        assert json.loads((tmp_path / "d" / "config.json").read_text())["data"]["seed"] == 3
        assert main(["train", "--config", str(files / "cfg.json"), "--data", str(tmp_path / "d" / "manifest.json"),
                     "--out", str(tmp_path / "r"), "--max-iterations", "1"]) == 0


class TestUsage:
    def test_unknown_command(self):
        with pytest.raises(SystemExit) as exc:
            main(["bogus"])
        assert exc.value.code == 1

    def test_bad_json_names_line(self, tmp_path, capsys):
        (tmp_path / "cfg.json").write_text('{"preset": "micro",\n  oops}')
        assert main(["train", "--config", str(tmp_path / "cfg.json"), "--data", "x", "--out",
                     str(tmp_path / "r")]) == 1
        assert "line 2" in capsys.readouterr().err

    def test_unknown_training_key(self, tmp_path):
        (tmp_path / "cfg.json").write_text(json.dumps({"training": {"batch": 3}}))
        with pytest.raises(cli.ConfigError, match="batch"):
            load_configs(tmp_path / "cfg.json")

    def test_negative_iterations(self, files, tmp_path):
        assert main(args(files, "train", tmp_path / "r", "--max-iterations", "-1")) == 1

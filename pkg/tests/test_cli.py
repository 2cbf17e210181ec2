import contextlib
import io
import json
import os

import pytest

from msn.cli import ABLATION_AXES, THREAD_VARS, ablate, main
from msn.config import TrainConfig, dump_config
from msn.train import train


def tiny_config(**kw):
    base = dict(steps=4, warmup_steps=1, batch_size=8, per_class=8, classes=4,
                image_size=16, patch_size=4, depth=1, hidden_dim=16, heads=2,
                prototypes=8, head_output_dim=8)
    base.update(kw)
    return TrainConfig(**base)


def _run_main(argv):
    """Invoke the CLI in-process, returning (exit_code, parsed stdout records)."""
    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        code = main(argv)
    lines = [ln for ln in buf.getvalue().splitlines() if ln]
    return code, [json.loads(ln) for ln in lines]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A config file plus one finished training run, shared read-only."""
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "tiny.cfg"
    cfg_path.write_text(dump_config(tiny_config()))
    out = root / "run"
    code, records = _run_main(
        ["train", "--config", str(cfg_path), "--out", str(out)])
    assert code == 0
    return {"root": root, "config": str(cfg_path), "out": str(out),
            "checkpoint": str(out / "checkpoint.ckpt"), "records": records}


class TestTrainCommand:
    def test_writes_metrics_and_checkpoint(self, workspace):
        assert os.path.exists(workspace["checkpoint"])
        with open(os.path.join(workspace["out"], "metrics.jsonl")) as f:
            rows = [json.loads(ln) for ln in f]
        assert [r["step"] for r in rows] == [0, 1, 2, 3]
        assert all("loss" in r for r in rows)

    def test_emits_step_records_then_done(self, workspace):
        records = workspace["records"]
        assert len(records) == 5
        assert [r["step"] for r in records[:4]] == [0, 1, 2, 3]
        done = records[-1]
        assert done["event"] == "done"
        assert done["step"] == 4
        assert done["checkpoint"] == workspace["checkpoint"]

    def test_resume_finished_run_is_a_no_op(self, workspace, tmp_path):
        out = tmp_path / "resumed"
        code, records = _run_main(
            ["train", "--config", workspace["config"], "--out", str(out),
             "--resume", workspace["checkpoint"]])
        assert code == 0
        assert records == [{"event": "done", "step": 4,
                            "checkpoint": str(out / "checkpoint.ckpt")}]
        assert os.path.exists(out / "checkpoint.ckpt")

    def test_seed_flag_overrides_config(self, workspace, tmp_path):
        code, records = _run_main(
            ["train", "--config", workspace["config"], "--seed", "7",
             "--out", str(tmp_path / "seeded")])
        assert code == 0
        assert records[0]["loss"] != workspace["records"][0]["loss"]


class TestEvalCommand:
    def test_reports_probe_accuracy(self, workspace):
        code, records = _run_main(
            ["eval", "--checkpoint", workspace["checkpoint"],
             "--shots", "2", "--probe-seeds", "2"])
        assert code == 0
        (rec,) = records
        assert rec["step"] == 4
        assert rec["shots"] == 2
        assert rec["seeds"] == [0, 1]
        assert len(rec["per_seed_top1"]) == 2
        assert 0.0 <= rec["mean_top1"] <= 1.0
        assert rec["std_top1"] >= 0.0


class TestInspectCommand:
    def test_describes_checkpoint(self, workspace):
        code, records = _run_main(
            ["inspect-checkpoint", "--checkpoint", workspace["checkpoint"]])
        assert code == 0
        (rec,) = records
        assert rec["step"] == 4
        assert rec["optim_t"] == 4
        assert rec["n_arrays"] == len(rec["arrays"])
        assert rec["arrays"]["prototypes"] == [8, 8]
        assert any(k.startswith("anchor/") for k in rec["arrays"])
        assert any(k.startswith("target/") for k in rec["arrays"])
        assert any(ln.startswith("steps") for ln in rec["config"])


class TestProfileCommand:
    def test_emits_view_step_and_sweep_records(self, workspace):
        code, records = _run_main(
            ["profile", "--config", workspace["config"], "--repeats", "1",
             "--steps", "1", "--per-class", "8", "--sweep", "0.0", "0.5"])
        assert code == 0
        views = [r for r in records if r["record"] == "view"]
        steps = [r for r in records if r["record"] == "step"]
        sweep = [r for r in records if r["record"] == "sweep"]
        assert len(views) == 4  # unmasked target plus three anchors
        assert views[0]["role"] == "target"
        assert views[0]["n_patches"] == 16
        assert all(v["flops"] > 0 and v["ms"] > 0 for v in views)
        assert all(v["n_patches"] < 16 for v in views[1:])
        (step,) = steps
        assert step["step_ms"] > 0 and step["peak_bytes"] > 0
        assert 0.0 < step["flop_ratio"] < 1.0
        assert [p["ratio"] for p in sweep] == [0.0, 0.5]
        assert sweep[0]["n_patches"] == 16 and sweep[1]["n_patches"] == 8
        assert sweep[0]["flops"] > sweep[1]["flops"]


class TestAblateLibrary:
    def test_masking_axis_covers_four_strategies(self):
        rows = ablate(tiny_config(steps=2), "masking_strategy", seeds=(0,),
                      shots=2, probe_seeds=(0,))
        assert [r["variant"] for r in rows] == [
            "no-mask", "focal", "random", "random+focal"]
        for row in rows:
            assert row["axis"] == "masking_strategy"
            assert row["seeds"] == [0]
            assert len(row["accuracy"]) == 1
            assert 0.0 <= row["mean"] <= 1.0
            assert row["steps"] == 2

    def test_view_sharing_axis_covers_three_modes(self):
        rows = ablate(tiny_config(steps=2), "view_sharing", seeds=(0,),
                      shots=2, probe_seeds=(0,))
        assert [r["variant"] for r in rows] == [
            "shared", "color-jitter", "independent"]

    def test_rerun_produces_identical_table(self):
        args = dict(seeds=(0,), shots=2, probe_seeds=(0,))
        first = ablate(tiny_config(steps=2), "prototypes", **args)
        second = ablate(tiny_config(steps=2), "prototypes", **args)
        assert first == second

    def test_log_callback_sees_every_row(self):
        seen = []
        rows = ablate(tiny_config(steps=2), "sinkhorn", seeds=(0,), shots=2,
                      probe_seeds=(0,), log=seen.append)
        assert seen == rows

    def test_unknown_axis_is_rejected(self):
        with pytest.raises(ValueError, match="unknown ablation axis"):
            ablate(tiny_config(), "paint_color")

    def test_steps_override_shortens_runs(self):
        rows = ablate(tiny_config(steps=4), "sinkhorn", seeds=(0,), shots=2,
                      probe_seeds=(0,), steps=2)
        assert all(r["steps"] == 2 for r in rows)


class TestAblateCommand:
    def test_axis_emits_one_row_per_variant(self, workspace):
        code, records = _run_main(
            ["ablate", "--config", workspace["config"],
             "--axis", "view_sharing", "--steps", "2", "--shots", "2"])
        assert code == 0
        assert [r["variant"] for r in records] == [
            "shared", "color-jitter", "independent"]
        assert all(r["seeds"] == [0, 1, 2] for r in records)
        assert all(len(r["accuracy"]) == 3 for r in records)

    def test_unknown_axis_exits_with_usage_error(self, workspace):
        with pytest.raises(SystemExit) as exc:
            _run_main(["ablate", "--config", workspace["config"],
                       "--axis", "bogus"])
        assert exc.value.code == 2


class TestEntryPoint:
    def test_missing_subcommand_is_a_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            _run_main([])
        assert exc.value.code == 2

    def test_threads_flag_pins_blas_env(self, workspace, monkeypatch):
        for var in THREAD_VARS:
            monkeypatch.setenv(var, "sentinel")
        code, _ = _run_main(
            ["--threads", "2", "inspect-checkpoint",
             "--checkpoint", workspace["checkpoint"]])
        assert code == 0
        assert all(os.environ[var] == "2" for var in THREAD_VARS)


class TestMaskFreeTraining:
    def test_single_unmasked_anchor_trains_cleanly(self):
        log = []
        state = train(tiny_config(masks="none", n_anchors=1, steps=3),
                      log=log.append)
        assert state.step == 3
        assert all(r["loss"] == pytest.approx(r["loss"]) for r in log)

    def test_axis_table_lists_every_defined_variant(self):
        counts = {axis: len(rows) for axis, rows in ABLATION_AXES.items()}
        assert counts == {"masking_strategy": 4, "masking_ratio": 4,
                          "view_sharing": 3, "prototypes": 3, "sinkhorn": 3}

import json
import os

import numpy as np
import pytest

from touchgate.cli import main
from touchgate.config import Config
from touchgate.metrics import MetricsRow, read_metrics, write_metrics

SMALL = dict(d_model=32, tactile_hidden=16, gate_hidden=16, batch_size=8,
             episodes_per_task=2, pretrain_steps=3, finetune_steps=3,
             eval_episodes=2)


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    """Config file, tiny dataset, and tiny checkpoints shared by CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    cfg = Config(**SMALL)
    cfg_path = str(root / "run.cfg")
    cfg.write(cfg_path)
    data = str(root / "data.bin")
    assert main(["gen-data", "--config", cfg_path, "--out", data]) == 0
    van = str(root / "van.ckpt")
    assert main(["pretrain", "--config", cfg_path, "--data", data,
                 "--out", van, "--log-every", "0"]) == 0
    ex3 = str(root / "ex3.ckpt")
    assert main(["finetune", "--config", cfg_path, "--variant", "ex3",
                 "--data", data, "--init", van, "--out", ex3,
                 "--log-every", "0"]) == 0
    return {"root": root, "cfg": cfg, "cfg_path": cfg_path, "data": data,
            "van": van, "ex3": ex3}


# ---- usage and error exits -----------------------------------------------------------


def test_no_command_is_usage_error(capsys):
    assert main([]) == 1
    assert "usage" in capsys.readouterr().err.lower()


def test_unknown_task_and_variant(tmp_path, work, capsys):
    assert main(["gen-data", "--task", "juggling",
                 "--out", str(tmp_path / "x.bin")]) == 1
    assert "unknown task" in capsys.readouterr().err
    assert main(["finetune", "--variant", "ex9", "--data", work["data"],
                 "--out", str(tmp_path / "x.ckpt")]) == 1
    assert "unknown variant" in capsys.readouterr().err


def test_gen_data_requires_out(capsys):
    assert main(["gen-data"]) == 1
    assert "--out" in capsys.readouterr().err


def test_missing_files_are_data_errors(tmp_path, work, capsys):
    assert main(["pretrain", "--data", str(tmp_path / "nope.bin"),
                 "--out", str(tmp_path / "o.ckpt")]) == 2
    assert main(["eval", "--config", work["cfg_path"],
                 "--ckpt", str(tmp_path / "nope.ckpt"), "--task", "stamp"]) == 2
    capsys.readouterr()


def test_config_hash_mismatch_is_data_error(work, tmp_path, capsys):
    other = Config(**{**SMALL, "seed": 77})
    p = str(tmp_path / "other.cfg")
    other.write(p)
    assert main(["eval", "--config", p, "--ckpt", work["van"],
                 "--task", "stamp"]) == 2
    assert "config hash" in capsys.readouterr().err


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
    assert "usage" in capsys.readouterr().out.lower()


# ---- gen-data ------------------------------------------------------------------------


def test_gen_data_reports_size_and_success(tmp_path, work, capsys):
    out = str(tmp_path / "d.bin")
    assert main(["gen-data", "--config", work["cfg_path"], "--task",
                 "pick_place,stamp", "--episodes", "2", "--out", out]) == 0
    msg = capsys.readouterr().out
    assert f"{os.path.getsize(out)} bytes" in msg
    assert "expert success" in msg and "contact fraction" in msg


def test_gen_data_text_format(tmp_path, work):
    out = str(tmp_path / "d.jsonl")
    assert main(["gen-data", "--config", work["cfg_path"], "--task", "stamp",
                 "--episodes", "1", "--out", out, "--text"]) == 0
    first = open(out).readline()
    assert json.loads(first)["format"].startswith("touchgate")


def test_gen_data_deterministic_bytes(tmp_path, work):
    a, b = str(tmp_path / "a.bin"), str(tmp_path / "b.bin")
    for out in (a, b):
        assert main(["gen-data", "--config", work["cfg_path"], "--task",
                     "zipper", "--episodes", "2", "--out", out]) == 0
    assert open(a, "rb").read() == open(b, "rb").read()


# ---- training wrappers ------------------------------------------------------------------


def test_checkpoints_carry_phase_meta(work):
    from touchgate.checkpoint import load_checkpoint
    _, hv = load_checkpoint(work["van"])
    assert hv["meta"]["phase"] == "pretrain" and hv["variant"] == "ex0"
    _, hf = load_checkpoint(work["ex3"])
    assert hf["meta"]["phase"] == "finetune" and hf["variant"] == "ex3"
    assert hf["meta"]["init"] == "van.ckpt"
    assert hv["meta"]["dataset_records"] > 0


def test_finetune_is_deterministic(work, tmp_path):
    again = str(tmp_path / "ex3b.ckpt")
    assert main(["finetune", "--config", work["cfg_path"], "--variant", "ex3",
                 "--data", work["data"], "--init", work["van"], "--out", again,
                 "--log-every", "0"]) == 0
    assert open(again, "rb").read() == open(work["ex3"], "rb").read()


# ---- eval ---------------------------------------------------------------------------


def test_eval_appends_metrics_row(work, tmp_path, capsys):
    out = str(tmp_path / "m.csv")
    args = ["eval", "--config", work["cfg_path"], "--ckpt", work["ex3"],
            "--task", "stamp", "--episodes", "1", "--batched", "--out", out]
    assert main(args) == 0
    assert main(args) == 0                  # append second row
    rows, header = read_metrics(out)
    assert len(rows) == 2
    assert rows[0].variant == "ex3" and rows[0].experiment_id == "ex3"
    assert rows[0].episodes == 1
    assert header["config_hash"] == work["cfg"].config_hash()
    assert "appended" in capsys.readouterr().out


def test_eval_mode_and_supply_tag_experiment_id(work, tmp_path):
    out = str(tmp_path / "m.csv")
    assert main(["eval", "--config", work["cfg_path"], "--ckpt", work["ex3"],
                 "--task", "stamp", "--episodes", "1", "--batched",
                 "--mode", "gate-off", "--no-tactile", "--out", out]) == 0
    rows, _ = read_metrics(out)
    assert rows[0].experiment_id == "ex3-gateoff-notactile"


def test_eval_zero_episodes_row(work, tmp_path):
    out = str(tmp_path / "m.csv")
    assert main(["eval", "--config", work["cfg_path"], "--ckpt", work["van"],
                 "--task", "wipe", "--episodes", "0", "--batched",
                 "--out", out]) == 0
    rows, _ = read_metrics(out)
    assert rows[0].episodes == 0 and rows[0].grasp_success is None


def test_eval_serial_reports_timing(work, tmp_path, capsys):
    assert main(["eval", "--config", work["cfg_path"], "--ckpt", work["van"],
                 "--task", "stamp", "--episodes", "1"]) == 0
    msg = capsys.readouterr().out
    assert "replan p50" in msg and "budget" in msg


def test_eval_deterministic_rows_identical(work, tmp_path):
    outs = []
    for name in ("a.csv", "b.csv"):
        out = str(tmp_path / name)
        assert main(["eval", "--config", work["cfg_path"], "--ckpt",
                     work["ex3"], "--task", "stamp", "--episodes", "1",
                     "--deterministic", "--out", out]) == 0
        outs.append(open(out, "rb").read())
    assert outs[0] == outs[1]


# ---- attention dump ---------------------------------------------------------------------


def test_dump_attn_jsonl(work, tmp_path, capsys):
    out = str(tmp_path / "attn.jsonl")
    assert main(["dump-attn", "--config", work["cfg_path"], "--ckpt",
                 work["ex3"], "--data", work["data"], "--frames", "0:6",
                 "--out", out]) == 0
    assert "attn_target_mass" in capsys.readouterr().out
    lines = [json.loads(l) for l in open(out)]
    head, recs = lines[0], lines[1:]
    assert head["format"] == "touchgate-attn" and head["frames"] == 6
    assert head["n_patches"] == 16
    for rec in recs:
        w = np.asarray(rec["weights"])     # [blocks, heads, P]
        np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-5)
        layer_mean = w[head["layer"]].mean(axis=0)
        expect = layer_mean[rec["target_patches"]].sum()
        assert rec["mass"] == pytest.approx(expect, abs=1e-6)


def test_dump_attn_bad_selectors(work, tmp_path, capsys):
    assert main(["dump-attn", "--config", work["cfg_path"], "--ckpt",
                 work["ex3"], "--data", work["data"], "--frames",
                 "900000:900001"]) == 2
    assert main(["dump-attn", "--config", work["cfg_path"], "--ckpt",
                 work["ex3"], "--data", work["data"], "--frames", "0:2",
                 "--layer", "7"]) == 1
    capsys.readouterr()


# ---- report --------------------------------------------------------------------------


def _verdict_rows(hi, lo, hi_val, lo_val, seeds=(1, 2, 3, 4, 5)):
    rows = []
    for variant, v in ((hi, hi_val), (lo, lo_val)):
        for seed in seeds:
            for task in ("zipper", "stamp"):
                rows.append(MetricsRow(
                    experiment_id=variant, variant=variant, seed=seed,
                    task=task, episodes=10, grasp_success=v,
                    contact_half_success=v, contact_full_success=v,
                    overall_success=v))
    return rows


def test_report_consolidates_and_checks(tmp_path, capsys):
    d = tmp_path / "runs"
    d.mkdir()
    write_metrics(str(d / "a.csv"), _verdict_rows("ex3", "ex2", 0.9, 0.4),
                  config_hash="h", seed=0)
    with open(d / "notes.csv", "w") as f:
        f.write("just,a,plain,csv\n")      # skipped silently
    assert main(["report", "--in", str(d)]) == 0
    out = capsys.readouterr().out
    assert "ex3>ex2: pass" in out
    rows, _ = read_metrics(str(d / "consolidated.csv"))
    assert len(rows) == 20
    assert main(["report", "--in", str(d), "--check"]) == 0

    write_metrics(str(d / "b.csv"), _verdict_rows("ex0", "ex1", 0.2, 0.8),
                  config_hash="h", seed=0)
    assert main(["report", "--in", str(d), "--check"]) == 3
    assert "ex0>ex1: fail" in capsys.readouterr().out


def test_report_idempotent(tmp_path, capsys):
    d = tmp_path / "runs"
    d.mkdir()
    write_metrics(str(d / "a.csv"), _verdict_rows("ex3", "ex2", 0.9, 0.4),
                  config_hash="h", seed=0)
    assert main(["report", "--in", str(d)]) == 0
    first = open(d / "consolidated.csv", "rb").read()
    assert main(["report", "--in", str(d)]) == 0   # own output excluded
    assert open(d / "consolidated.csv", "rb").read() == first
    capsys.readouterr()


def test_report_empty_dir(tmp_path, capsys):
    d = tmp_path / "empty"
    d.mkdir()
    assert main(["report", "--in", str(d)]) == 2
    assert "no metrics" in capsys.readouterr().err

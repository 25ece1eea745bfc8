import json
from pathlib import Path

import numpy as np
import pytest

from mimforge.cli import (
    convergence_report,
    read_metrics_csv,
    render_attention,
    run,
    write_metrics_csv,
    write_pgm,
)
from mimforge.pipeline import MetricsRecord

TINY = {
    "seed": 3,
    "data": {"count": 24, "eval_count": 8, "size": 16, "num_classes": 3},
    "backbone": {"layers": 2, "hidden": 32, "heads": 2, "ffn": 64, "patch": 4, "resolution": 16},
    "tokenizer": {"vocab_size": 16, "code_dim": 8, "channels": [8, 16], "steps": 12, "batch_size": 8},
    "pretrain": {"steps": 6, "batch_size": 8},
    "finetune": {"epochs": 2, "batch_size": 8, "warmup_epochs": 1},
    "ablate": {"steps": 2, "finetune_epochs": 1},
    "elbo": {"batch_size": 4},
}


def _cfg(tmp_path: Path, **extra) -> Path:
    doc = json.loads(json.dumps(TINY))
    for key, value in extra.items():
        section, _, leaf = key.partition(".")
        doc.setdefault(section, {})[leaf] = value
    path = tmp_path / "config.json"
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """One tokenizer + one MIM checkpoint shared by the command tests."""
    root = tmp_path_factory.mktemp("cli")
    cfg = _cfg(root)
    assert run(["train-tokenizer", "--config", str(cfg), "--out", str(root / "tok")]) == 0
    tok = root / "tok" / "tokenizer.ckpt"
    assert run(
        [
            "pretrain",
            "--config",
            str(cfg),
            "--out",
            str(root / "pre"),
            "--set",
            f"pretrain.tokenizer_checkpoint={tok}",
        ]
    ) == 0
    return root, cfg, tok, root / "pre" / "checkpoint.ckpt"


def test_unknown_command_exits_2(capsys):
    assert run(["frobnicate", "--out", "x"]) == 2
    assert "usage" in capsys.readouterr().err.lower()


def test_unknown_flag_exits_2(capsys):
    assert run(["pretrain", "--out", "x", "--bogus"]) == 2
    assert "usage" in capsys.readouterr().err.lower()


def test_bad_config_value_reports_key(tmp_path, capsys):
    cfg = _cfg(tmp_path, **{"mask.ratio": 1.5})
    assert run(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    assert "mask.ratio" in capsys.readouterr().err


def test_gen_data_outputs(tmp_path):
    cfg = _cfg(tmp_path)
    out = tmp_path / "gen"
    assert run(["gen-data", "--config", str(cfg), "--out", str(out)]) == 0
    assert (out / "train.bin").exists()
    assert (out / "eval.bin").exists()
    assert (out / "samples.png").exists()
    assert (out / "manifest.json").exists()
    records = read_metrics_csv(out / "metrics.csv")
    assert any(r.metric == "count" and r.split == "train" and r.value == 24 for r in records)


def test_pretrain_deterministic_metrics(tmp_path, trained):
    root, cfg, tok, _ = trained
    out1, out2 = tmp_path / "a", tmp_path / "b"
    for out in (out1, out2):
        assert run(
            ["pretrain", "--config", str(cfg), "--out", str(out), "--set", f"pretrain.tokenizer_checkpoint={tok}"]
        ) == 0
    assert (out1 / "metrics.csv").read_bytes() == (out2 / "metrics.csv").read_bytes()


def test_manifest_reproduces_run(tmp_path, trained):
    root, _, tok, _ = trained
    manifest = root / "pre" / "manifest.json"
    out = tmp_path / "redo"
    assert run(["pretrain", "--config", str(manifest), "--out", str(out)]) == 0
    assert (out / "metrics.csv").read_bytes() == (root / "pre" / "metrics.csv").read_bytes()


def test_finetune_then_eval(tmp_path, trained):
    root, cfg, tok, pre = trained
    out = tmp_path / "ft"
    assert run(
        ["finetune", "--config", str(cfg), "--out", str(out), "--set", f"finetune.init_checkpoint={pre}"]
    ) == 0
    ckpt = out / "checkpoint.ckpt"
    ev = tmp_path / "ev"
    assert run(["eval", "--config", str(cfg), "--out", str(ev), "--set", f"eval.checkpoint={ckpt}"]) == 0
    (rec,) = read_metrics_csv(ev / "metrics.csv")
    assert rec.metric == "accuracy" and 0.0 <= rec.value <= 1.0
    # metrics stay append-ordered by step within each (split, metric)
    by_key = {}
    for r in read_metrics_csv(out / "metrics.csv"):
        by_key.setdefault((r.split, r.metric), []).append(r.step)
    assert by_key
    for steps in by_key.values():
        assert steps == sorted(steps)


def test_eval_task_mismatch_diagnostic(tmp_path, trained, capsys):
    root, cfg, tok, pre = trained
    out = tmp_path / "ft2"
    assert run(
        ["finetune", "--config", str(cfg), "--out", str(out), "--set", f"finetune.init_checkpoint={pre}"]
    ) == 0
    ev = tmp_path / "ev2"
    code = run(
        [
            "eval",
            "--config",
            str(cfg),
            "--out",
            str(ev),
            "--set",
            f"eval.checkpoint={out / 'checkpoint.ckpt'}",
            "--set",
            "eval.task=segment",
        ]
    )
    assert code == 1
    err = capsys.readouterr().err
    assert "segment" in err and "classify" in err


def test_elbo_command(tmp_path, trained):
    root, cfg, tok, pre = trained
    out = tmp_path / "elbo"
    assert run(
        [
            "elbo",
            "--config",
            str(cfg),
            "--out",
            str(out),
            "--set",
            f"elbo.checkpoint={pre}",
            "--set",
            f"elbo.tokenizer_checkpoint={tok}",
        ]
    ) == 0
    records = {r.metric: r.value for r in read_metrics_csv(out / "metrics.csv")}
    assert set(records) == {"stage1_term", "stage2_term", "mim_loss_per_token", "mean_masked_count"}
    assert abs(records["stage2_term"] + records["mim_loss_per_token"] * records["mean_masked_count"]) < 1e-5 * abs(
        records["stage2_term"]
    ) + 1e-9


def test_attend_writes_valid_pgms(tmp_path, trained):
    root, cfg, tok, pre = trained
    out = tmp_path / "attend"
    assert run(
        ["attend", "--config", str(cfg), "--out", str(out), "--set", f"attend.checkpoint={pre}"]
    ) == 0
    pgms = sorted(out.glob("*.pgm"))
    assert len(pgms) == 2 * 16  # heads x reference patches
    raw = pgms[0].read_bytes()
    assert raw.startswith(b"P5\n16 16\n255\n")
    pixels = raw.split(b"255\n", 1)[1]
    assert len(pixels) == 16 * 16
    values = np.frombuffer(pixels, dtype=np.uint8)
    assert values.min() == 0 and values.max() == 255  # min-max normalized span


def test_attend_single_reference(tmp_path, trained):
    root, cfg, tok, pre = trained
    out = tmp_path / "attend1"
    assert run(
        [
            "attend",
            "--config",
            str(cfg),
            "--out",
            str(out),
            "--set",
            f"attend.checkpoint={pre}",
            "--set",
            "attend.reference=5",
            "--set",
            "attend.layer=1",
        ]
    ) == 0
    pgms = sorted(out.glob("*.pgm"))
    assert [p.name for p in pgms] == ["attn_layer1_head0_ref005.pgm", "attn_layer1_head1_ref005.pgm"]


def test_write_pgm_constant_row_rule(tmp_path):
    # the degenerate constant attention row renders as uniform mid-gray
    from mimforge.store import Checkpoint

    gray = np.full((8, 8), 128.0)
    path = tmp_path / "c.pgm"
    write_pgm(gray, path)
    raw = path.read_bytes()
    pixels = np.frombuffer(raw.split(b"255\n", 1)[1], dtype=np.uint8)
    assert np.all(pixels == 128)


def test_ablate_command(tmp_path, trained):
    root, cfg, tok, pre = trained
    out = tmp_path / "abl"
    assert run(
        ["ablate", "--config", str(cfg), "--out", str(out), "--set", f"pretrain.tokenizer_checkpoint={tok}"]
    ) == 0
    lines = (out / "ablation.csv").read_text().strip().splitlines()
    assert len(lines) == 6  # header + 5 arms
    assert lines[0] == "arm,pretrain_loss,classify_accuracy,segment_miou"
    assert (out / "ablation.png").exists()


def test_report_command(tmp_path):
    run_a = tmp_path / "runA"
    run_b = tmp_path / "runB"
    run_a.mkdir()
    run_b.mkdir()
    recs_a = [MetricsRecord(e, "eval", "accuracy", v) for e, v in enumerate([0.3, 0.6, 0.9, 0.92])]
    recs_b = [MetricsRecord(e, "eval", "accuracy", v) for e, v in enumerate([0.2, 0.4])]
    write_metrics_csv(recs_a, run_a / "metrics.csv")
    write_metrics_csv(recs_b, run_b / "metrics.csv")
    cfg = tmp_path / "cfg.json"
    cfg.write_text(
        json.dumps({"report": {"inputs": [str(run_a / "metrics.csv"), str(run_b / "metrics.csv")]}})
    )
    out = tmp_path / "rep"
    assert run(["report", "--config", str(cfg), "--out", str(out)]) == 0
    text = (out / "report.csv").read_text()
    lines = text.strip().splitlines()
    assert lines[0] == "epoch,runA,runB"
    assert len(lines) == 1 + 4 + 2  # header + padded epochs + two summary rows
    assert lines[2].endswith(",0.4")  # runB's last value
    assert lines[3].split(",")[2] == ""  # runB padded with blanks
    assert any(line.startswith("epochs_to_90pct") for line in lines)
    assert (out / "convergence.png").exists()


def test_report_identical_runs_equal_summary(tmp_path):
    recs = [MetricsRecord(e, "eval", "accuracy", v) for e, v in enumerate([0.5, 0.8, 0.85])]
    for name in ("r1", "r2"):
        (tmp_path / name).mkdir()
        write_metrics_csv(recs, tmp_path / name / "metrics.csv")
    table, summary, series, epochs_to = convergence_report(
        [tmp_path / "r1" / "metrics.csv", tmp_path / "r2" / "metrics.csv"]
    )
    assert epochs_to["r1"] == epochs_to["r2"] == 2
    assert [row[1] for row in table[1:]] == [row[2] for row in table[1:]]


def test_report_missing_metric_errors(tmp_path):
    (tmp_path / "r").mkdir()
    write_metrics_csv([MetricsRecord(0, "train", "loss", 1.0)], tmp_path / "r" / "metrics.csv")
    with pytest.raises(Exception, match="accuracy"):
        convergence_report([tmp_path / "r" / "metrics.csv"])

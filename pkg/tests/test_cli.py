import numpy as np
import pytest

from tempbal.cli import main, parse_config
from tempbal.errors import ConfigError
from tempbal.rmt_lab import PLSpectrumSpec, synth_pl_matrix
from tempbal.weight_store import LayerTensor, WeightSnapshot, save_snapshot


@pytest.fixture()
def snapshot_path(tmp_path):
    mat = synth_pl_matrix(PLSpectrumSpec(size=64, decay=1.0, seed=5))
    rng = np.random.default_rng(1)
    snap = WeightSnapshot(
        epoch=3,
        layers=(
            LayerTensor("pl64", mat.values.shape, mat.values.reshape(-1)),
            LayerTensor("wide", (72, 10), rng.normal(size=720)),
            LayerTensor("dead", (6, 8), np.zeros(48)),
        ),
    )
    path = tmp_path / "model.wsnp"
    save_snapshot(snap, str(path))
    return path


def train_config(tmp_path, **overrides):
    values = {
        "eta0": "0.1",
        "total_epochs": "4",
        "samples": "240",
        "hidden": "16,8",
        "separation": "6.0",
        "timing": "off",
    }
    values.update({k: str(v) for k, v in overrides.items()})
    path = tmp_path / "run.cfg"
    path.write_text("\n".join(f"{k} = {v}" for k, v in values.items()) + "\n")
    return path


# ---------------------------------------------------------------------------
# analyze


def test_analyze_writes_metrics_and_histograms(snapshot_path, tmp_path):
    out = tmp_path / "out"
    assert main(["analyze", str(snapshot_path), "--out-dir", str(out)]) == 0
    lines = (out / "metrics.csv").read_text().splitlines()
    assert lines[0].startswith("layer,n,m,k,lambda_min,alpha_hill")
    rows = {line.split(",")[0]: line for line in lines[1:]}
    assert rows["pl64"].endswith("ok")
    assert rows["dead"].endswith("degenerate")
    # pl64 has decay 1.0, so the fitted exponent sits near 2
    alpha = float(rows["pl64"].split(",")[5])
    assert alpha == pytest.approx(2.0, rel=0.1)
    # orientation recorded: the 72x10 layer analyzes as 10 x 72
    assert rows["wide"].split(",")[1:3] == ["10", "72"]
    hist = (out / "esd_pl64.csv").read_text().splitlines()
    assert hist[0] == "log10_lambda_left,log10_lambda_right,count"
    counts = sum(int(line.split(",")[2]) for line in hist[1:])
    assert counts == 64


def test_analyze_deterministic_bytes(snapshot_path, tmp_path):
    out1, out2 = tmp_path / "o1", tmp_path / "o2"
    main(["analyze", str(snapshot_path), "--out-dir", str(out1)])
    main(["analyze", str(snapshot_path), "--out-dir", str(out2)])
    assert (out1 / "metrics.csv").read_bytes() == (out2 / "metrics.csv").read_bytes()
    assert (out1 / "esd_wide.csv").read_bytes() == (out2 / "esd_wide.csv").read_bytes()


def test_analyze_missing_file_exit_2(tmp_path):
    assert main(["analyze", str(tmp_path / "missing.wsnp")]) == 2


def test_analyze_corrupt_file_exit_2(tmp_path):
    bad = tmp_path / "bad.wsnp"
    bad.write_bytes(b"JUNKJUNKJUNK")
    assert main(["analyze", str(bad)]) == 2


def test_analyze_truncated_file_exit_2(snapshot_path, tmp_path):
    raw = snapshot_path.read_bytes()
    cut = tmp_path / "cut.wsnp"
    cut.write_bytes(raw[: len(raw) // 2])
    assert main(["analyze", str(cut)]) == 2


def test_analyze_zero_layer_snapshot_exit_2(tmp_path):
    import struct

    from tempbal.weight_store import MAGIC

    empty = tmp_path / "empty.wsnp"
    empty.write_bytes(MAGIC + struct.pack("<III", 1, 0, 0))
    assert main(["analyze", str(empty)]) == 2


def test_analyze_policy_flags(snapshot_path, tmp_path):
    out = tmp_path / "ks"
    assert main(["analyze", str(snapshot_path), "--policy", "ks", "--out-dir", str(out)]) == 0
    assert main(
        ["analyze", str(snapshot_path), "--policy", "fixfinger", "--bins", "50", "--out-dir", str(tmp_path / "ff")]
    ) == 0


# ---------------------------------------------------------------------------
# train


def test_train_runs_and_writes_outputs(tmp_path, capsys):
    cfg = train_config(tmp_path)
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out-dir", str(out), "--seed", "3"]) == 0
    captured = capsys.readouterr().out
    assert "final eval accuracy" in captured
    assert "analysis overhead" in captured
    telemetry = (out / "telemetry.csv").read_text().splitlines()
    assert telemetry[0].startswith("epoch,layer,alpha_hill")
    assert (out / "final.wsnp").exists()


def test_train_global_only_constant_lr_per_epoch(tmp_path):
    cfg = train_config(tmp_path, assignment="global_only")
    out = tmp_path / "run"
    main(["train", "--config", str(cfg), "--out-dir", str(out)])
    rows = [line.split(",") for line in (out / "telemetry.csv").read_text().splitlines()[1:]]
    by_epoch = {}
    for row in rows:
        if row[1] == "_epoch_":
            continue
        by_epoch.setdefault(row[0], set()).add(row[4])
    for epoch, lrs in by_epoch.items():
        assert len(lrs) == 1, f"epoch {epoch} has multiple learning rates {lrs}"


def test_train_tempbalance_range(tmp_path):
    from tempbal.scheduler import cal_rate

    cfg = train_config(tmp_path, s1=0.5, s2=1.5)
    out = tmp_path / "run"
    main(["train", "--config", str(cfg), "--out-dir", str(out)])
    rows = [line.split(",") for line in (out / "telemetry.csv").read_text().splitlines()[1:]]
    for row in rows:
        if row[1] == "_epoch_":
            continue
        eta_t = cal_rate(0.1, int(row[0]), 4)
        lr = float(row[4])
        assert 0.5 * eta_t - 1e-15 <= lr <= 1.5 * eta_t + 1e-15


def test_train_unknown_key_exit_1(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("foo = 1\n")
    assert main(["train", "--config", str(cfg)]) == 1
    assert "unknown key foo" in capsys.readouterr().err


def test_train_malformed_line_exit_1(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("eta0 0.1\n")
    assert main(["train", "--config", str(cfg)]) == 1


def test_train_divergence_exit_3(tmp_path, capsys):
    cfg = train_config(tmp_path, eta0="1e9", assignment="global_only")
    with np.errstate(all="ignore"):
        rc = main(["train", "--config", str(cfg), "--out-dir", str(tmp_path / "d")])
    assert rc == 3
    assert "epoch" in capsys.readouterr().err


def test_train_missing_config_exit_1(tmp_path):
    assert main(["train", "--config", str(tmp_path / "none.cfg")]) == 1


def test_config_comments_and_defaults(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("# full-line comment\neta0 = 0.2  # trailing comment\n\n")
    values = parse_config(str(cfg))
    assert values["eta0"] == "0.2"
    assert values["policy"] == "median"


def test_config_bad_value_reports_key(tmp_path):
    cfg = train_config(tmp_path, eta0="fast")
    from tempbal.cli import build_run

    with pytest.raises(ConfigError, match="eta0"):
        build_run(parse_config(str(cfg)))


# ---------------------------------------------------------------------------
# rmt


def test_rmt_single_cell(tmp_path, capsys):
    out = tmp_path / "table.csv"
    assert main(["rmt", "--q", "128", "--s", "1.0", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "Q,s,alpha_hill,alpha_pred,rel_err"
    q, s, alpha, pred, rel = lines[1].split(",")
    assert (q, s) == ("128", "1")
    assert float(rel) <= 0.15


def test_rmt_accuracy_improves_with_size(tmp_path):
    out = tmp_path / "table.csv"
    assert main(["rmt", "--q", "16,256", "--s", "0.5:3.0:0.5", "--out", str(out)]) == 0
    rows = [line.split(",") for line in out.read_text().splitlines()[1:]]
    small = [float(r[4]) for r in rows if r[0] == "16"]
    large = [float(r[4]) for r in rows if r[0] == "256"]
    assert np.mean(large) < np.mean(small)


def test_rmt_stdout_without_out(capsys):
    assert main(["rmt", "--q", "64", "--s", "1.0"]) == 0
    assert capsys.readouterr().out.startswith("Q,s,alpha_hill")


def test_rmt_empty_grid_exit_1(capsys):
    assert main(["rmt", "--q", "64", "--s", ""]) == 1
    assert main(["rmt", "--q", "", "--s", "1.0"]) == 1


def test_rmt_bad_range_exit_1():
    assert main(["rmt", "--q", "64", "--s", "3.0:1.0:0.5"]) == 1
    assert main(["rmt", "--q", "64", "--s", "a,b"]) == 1


def test_usage_error_exit_1():
    assert main(["frobnicate"]) == 1
    assert main(["train"]) == 1  # missing --config

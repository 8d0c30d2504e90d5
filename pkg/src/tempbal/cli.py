"""Command-line entry point: analyze / train / rmt subcommands.

    tempbal analyze <snapshot.wsnp> [--policy median|ks|fixfinger] [--bins N] [--out-dir D]
    tempbal train --config <path> [--seed N] [--out-dir D]
    tempbal rmt --q 64,256,1024 --s 0.5:3.0:0.25 [--out table.csv] [--seed N]

Exit codes: 0 success, 1 usage/config error, 2 data/parse error,
3 numerical failure. TEMPBAL_THREADS caps per-layer analysis parallelism.

Training is configured by a flat key=value file ('#' starts a comment,
missing keys take defaults, unknown keys are rejected):

    key                      default      meaning
    ----------------------   ----------   -----------------------------------
    eta0                     0.1          initial global learning rate
    total_epochs             30           cosine annealing horizon T
    epochs                   =T           epochs to actually run
    s1, s2                   0.5, 1.5     scaling ratio bounds
    assignment               tempbalance  tempbalance|sqrt|log2|step|lars|global_only
    metric                   alpha_hill   alpha_hill|spectral_norm|alpha_weighted
    start_epoch              0            epochs before layer-wise rates engage
    update_interval_iters    390          iterations between schedule refreshes
    exclude_first_last       true         first/last layers ride the global rate
    policy                   median       median|ks|fixfinger
    policy_bins              100          histogram bins for fixfinger
    hidden                   32,16        dense hidden widths
    activation               relu         relu|tanh
    init                     he           he|xavier
    conv_stem                (none)       e.g. 4x1x3x3,8x4x3x3 (out,in,kh,kw blocks)
    conv_input               (none)       e.g. 1x8x8 (channels x height x width)
    dataset                  gaussian     gaussian|csv
    classes                  2            gaussian: number of classes
    dim                      20           gaussian: feature dimension
    samples                  1000         gaussian: total samples
    spread                   1.0          gaussian: within-class std
    separation               4.0          gaussian: norm of each class mean
    split                    0.8          train fraction
    csv_path                 (none)       csv: input file
    label_column             label        csv: label column name
    lambda_sr                0.0          top-singular-value penalty coefficient
    batch_size               128
    momentum                 0.9
    weight_decay             0.0005
    seed                     0
    timing                   wall         wall|off (off zeroes CSV wall-times)
"""

from __future__ import annotations

import argparse
import re
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, NumericalError, TempbalError
from .htsr import LambdaMinPolicy, analyze_snapshot
from .rmt_lab import verify_s_alpha
from .scheduler import ASSIGNMENTS, METRICS, ScheduleConfig
from .train_engine import (
    CsvDataSpec,
    GaussianMixtureSpec,
    ModelSpec,
    OptimState,
    run_training,
)
from .weight_store import load_snapshot, save_snapshot

# CI gate for the s vs alpha sweep; calibrated on the median-policy sweep
# over s in [0.5, 3.0], where matrices of size >= 64 fit well inside it.
RMT_REL_ERR_TOL = 0.15
RMT_GATE_MIN_SIZE = 64
RMT_GATE_S_RANGE = (0.5, 3.0)

_CONFIG_DEFAULTS: dict[str, str] = {
    "eta0": "0.1",
    "total_epochs": "30",
    "epochs": "",
    "s1": "0.5",
    "s2": "1.5",
    "assignment": "tempbalance",
    "metric": "alpha_hill",
    "start_epoch": "0",
    "update_interval_iters": "390",
    "exclude_first_last": "true",
    "policy": "median",
    "policy_bins": "100",
    "hidden": "32,16",
    "activation": "relu",
    "init": "he",
    "conv_stem": "",
    "conv_input": "",
    "dataset": "gaussian",
    "classes": "2",
    "dim": "20",
    "samples": "1000",
    "spread": "1.0",
    "separation": "4.0",
    "split": "0.8",
    "csv_path": "",
    "label_column": "label",
    "lambda_sr": "0.0",
    "batch_size": "128",
    "momentum": "0.9",
    "weight_decay": "0.0005",
    "seed": "0",
    "timing": "wall",
}


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems through ConfigError (exit 1)."""

    def error(self, message):
        raise ConfigError(message)


def _fmt(value) -> str:
    return repr(float(value))


def _int(raw: str, key: str) -> int:
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"key {key}: expected integer, got {raw!r}") from None


def _float(raw: str, key: str) -> float:
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"key {key}: expected number, got {raw!r}") from None


def _bool(raw: str, key: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ConfigError(f"key {key}: expected boolean, got {raw!r}")


def parse_config(path: str) -> dict[str, str]:
    """Flat key=value config; unknown keys rejected, missing keys defaulted."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc}") from exc
    values = dict(_CONFIG_DEFAULTS)
    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{line_no}: expected key=value, got {line.strip()!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in values:
            raise ConfigError(f"unknown key {key}")
        values[key] = raw.strip()
    return values


def _parse_conv_stem(raw: str) -> tuple[tuple[int, int, int, int], ...]:
    if not raw:
        return ()
    blocks = []
    for block in raw.split(","):
        parts = block.strip().split("x")
        if len(parts) != 4:
            raise ConfigError(f"conv_stem block {block!r}: expected out x in x kh x kw")
        blocks.append(tuple(_int(p, "conv_stem") for p in parts))
    return tuple(blocks)


def _parse_conv_input(raw: str) -> tuple[int, int, int] | None:
    if not raw:
        return None
    parts = raw.strip().split("x")
    if len(parts) != 3:
        raise ConfigError(f"conv_input {raw!r}: expected channels x height x width")
    return tuple(_int(p, "conv_input") for p in parts)


def build_run(values: dict[str, str], seed_override: int | None = None):
    """Turn parsed config values into the typed objects run_training needs."""
    seed = seed_override if seed_override is not None else _int(values["seed"], "seed")

    if values["dataset"] == "gaussian":
        data = GaussianMixtureSpec(
            classes=_int(values["classes"], "classes"),
            dim=_int(values["dim"], "dim"),
            samples=_int(values["samples"], "samples"),
            spread=_float(values["spread"], "spread"),
            separation=_float(values["separation"], "separation"),
            split=_float(values["split"], "split"),
        )
        in_dim, n_classes = data.dim, data.classes
    elif values["dataset"] == "csv":
        if not values["csv_path"]:
            raise ConfigError("dataset=csv requires csv_path")
        data = CsvDataSpec(
            path=values["csv_path"],
            label_column=values["label_column"],
            split=_float(values["split"], "split"),
        )
        from .train_engine import make_dataset

        probe = make_dataset(data, seed)
        in_dim, n_classes = probe.dim, probe.n_classes
    else:
        raise ConfigError(f"key dataset: expected gaussian or csv, got {values['dataset']!r}")

    conv_stem = _parse_conv_stem(values["conv_stem"])
    conv_input = _parse_conv_input(values["conv_input"])
    if conv_stem:
        from .train_engine import conv_output_shape

        if conv_input is None:
            raise ConfigError("conv_stem requires conv_input")
        c, h, w = conv_output_shape(conv_stem, conv_input)
        first_width = c * h * w
    else:
        first_width = in_dim
    hidden = [_int(p, "hidden") for p in values["hidden"].split(",") if p.strip()]
    model = ModelSpec(
        widths=tuple([first_width] + hidden + [n_classes]),
        activation=values["activation"],
        init=values["init"],
        seed=seed,
        conv_stem=conv_stem,
        conv_input=conv_input,
    )

    total_epochs = _int(values["total_epochs"], "total_epochs")
    sched = ScheduleConfig(
        eta0=_float(values["eta0"], "eta0"),
        total_epochs=total_epochs,
        s1=_float(values["s1"], "s1"),
        s2=_float(values["s2"], "s2"),
        assignment=values["assignment"],
        metric=values["metric"],
        start_epoch=_int(values["start_epoch"], "start_epoch"),
        update_interval_iters=_int(values["update_interval_iters"], "update_interval_iters"),
        exclude_first_last=_bool(values["exclude_first_last"], "exclude_first_last"),
    )
    if values["assignment"] not in ASSIGNMENTS:
        raise ConfigError(f"key assignment: unknown value {values['assignment']!r}")
    if values["metric"] not in METRICS:
        raise ConfigError(f"key metric: unknown value {values['metric']!r}")

    policy = LambdaMinPolicy(variant=_policy_variant(values["policy"]), histogram_bins=_int(values["policy_bins"], "policy_bins"))
    optim = OptimState(
        momentum=_float(values["momentum"], "momentum"),
        weight_decay=_float(values["weight_decay"], "weight_decay"),
        batch_size=_int(values["batch_size"], "batch_size"),
    )
    epochs = _int(values["epochs"], "epochs") if values["epochs"] else total_epochs
    lambda_sr = _float(values["lambda_sr"], "lambda_sr")
    if values["timing"] not in ("wall", "off"):
        raise ConfigError(f"key timing: expected wall or off, got {values['timing']!r}")
    return model, data, sched, policy, optim, epochs, lambda_sr, seed, values["timing"] == "wall"


def _policy_variant(raw: str) -> str:
    if raw not in ("median", "ks", "fixfinger"):
        raise ConfigError(f"key policy: expected median, ks or fixfinger, got {raw!r}")
    return raw


def _safe_name(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", name)


METRICS_HEADER = "layer,n,m,k,lambda_min,alpha_hill,spectral_norm,alpha_weighted,status"


def cmd_analyze(args) -> int:
    snapshot = load_snapshot(args.snapshot)
    policy = LambdaMinPolicy(variant=args.policy, histogram_bins=args.bins)
    rows = analyze_snapshot(snapshot, policy)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    lines = [METRICS_HEADER]
    for row in rows:
        if row.metrics is None:
            lines.append(f"{row.name},{row.n},{row.m},,,,,,degenerate")
        else:
            met = row.metrics
            lines.append(
                f"{row.name},{row.n},{row.m},{met.k},{_fmt(met.lambda_min)},"
                f"{_fmt(met.alpha_hill)},{_fmt(met.spectral_norm)},{_fmt(met.alpha_weighted)},ok"
            )
    metrics_path = out_dir / "metrics.csv"
    metrics_path.write_text("\n".join(lines) + "\n")

    for row in rows:
        hist_path = out_dir / f"esd_{_safe_name(row.name)}.csv"
        hist_lines = ["log10_lambda_left,log10_lambda_right,count"]
        if row.esd is not None:
            positive = row.esd.eigenvalues[row.esd.eigenvalues > 0]
            if positive.size:
                counts, edges = np.histogram(np.log10(positive), bins=args.bins)
                for i, count in enumerate(counts):
                    hist_lines.append(f"{_fmt(edges[i])},{_fmt(edges[i + 1])},{count}")
        hist_path.write_text("\n".join(hist_lines) + "\n")

    print(f"analyzed {len(rows)} layers -> {metrics_path}")
    return 0


def cmd_train(args) -> int:
    values = parse_config(args.config)
    model, data, sched, policy, optim, epochs, lambda_sr, seed, timing = build_run(
        values, args.seed
    )
    telemetry, final = run_training(
        model, data, sched, policy, lambda_sr=lambda_sr, epochs=epochs, seed=seed, optim=optim
    )
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    telemetry_path = out_dir / "telemetry.csv"
    with open(telemetry_path, "w") as fh:
        telemetry.write_csv(fh, timing=timing)
    save_snapshot(final, str(out_dir / "final.wsnp"))

    epoch_rows = telemetry.epoch_rows()
    final_acc = epoch_rows[-1].eval_acc if epoch_rows else float("nan")
    total_epoch = telemetry.total_epoch_sec()
    overhead = 100.0 * telemetry.total_analysis_sec() / total_epoch if total_epoch > 0 else 0.0
    print(f"final eval accuracy: {final_acc:.4f}")
    print(f"analysis overhead: {overhead:.2f}% of training time")
    return 0


def _parse_grid(raw: str, what: str) -> list[float]:
    """Comma list (1,2,3) or colon range (start:stop:step, stop inclusive)."""
    raw = raw.strip()
    if not raw:
        raise ConfigError(f"empty {what} grid")
    if ":" in raw:
        parts = raw.split(":")
        if len(parts) != 3:
            raise ConfigError(f"{what} range must be start:stop:step, got {raw!r}")
        try:
            start, stop, step = (float(p) for p in parts)
        except ValueError:
            raise ConfigError(f"{what} range: non-numeric field in {raw!r}") from None
        if step <= 0 or stop < start:
            raise ConfigError(f"{what} range: need step > 0 and stop >= start")
        count = int(round((stop - start) / step)) + 1
        return [start + i * step for i in range(count) if start + i * step <= stop + 1e-12]
    try:
        return [float(p) for p in raw.split(",") if p.strip()]
    except ValueError:
        raise ConfigError(f"{what} grid: non-numeric entry in {raw!r}") from None


def cmd_rmt(args) -> int:
    sizes = [int(q) for q in _parse_grid(args.q, "q")]
    s_grid = _parse_grid(args.s, "s")
    if not sizes or not s_grid:
        raise ConfigError("q and s grids must be nonempty")

    lines = ["Q,s,alpha_hill,alpha_pred,rel_err"]
    violations = []
    for size in sizes:
        for row in verify_s_alpha(size, s_grid, seed=args.seed):
            lines.append(
                f"{row.size},{row.decay:g},{_fmt(row.alpha_hill)},{_fmt(row.alpha_pred)},{_fmt(row.rel_err)}"
            )
            gated = (
                row.size >= RMT_GATE_MIN_SIZE
                and RMT_GATE_S_RANGE[0] <= row.decay <= RMT_GATE_S_RANGE[1]
            )
            if gated and row.rel_err > RMT_REL_ERR_TOL:
                violations.append(row)
    table = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(table)
        print(f"wrote {len(lines) - 1} cells -> {args.out}")
    else:
        sys.stdout.write(table)
    if violations:
        worst = max(violations, key=lambda r: r.rel_err)
        raise NumericalError(
            f"{len(violations)} sweep cells exceed rel_err tolerance {RMT_REL_ERR_TOL} "
            f"(worst: Q={worst.size} s={worst.decay:g} rel_err={worst.rel_err:.4f})"
        )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tempbal", description="Spectral diagnostics and layer-wise LR scheduling")
    sub = parser.add_subparsers(dest="command", required=True)

    p_analyze = sub.add_parser("analyze", help="per-layer tail metrics of a weight snapshot")
    p_analyze.add_argument("snapshot", help="path to a .wsnp snapshot file")
    p_analyze.add_argument("--policy", choices=("median", "ks", "fixfinger"), default="median")
    p_analyze.add_argument("--bins", type=int, default=100, help="histogram bins (fixfinger and ESD output)")
    p_analyze.add_argument("--out-dir", default=".", help="where to write metrics.csv and ESD histograms")
    p_analyze.set_defaults(func=cmd_analyze)

    p_train = sub.add_parser("train", help="run the training loop under a config file")
    p_train.add_argument("--config", required=True, help="flat key=value config file")
    p_train.add_argument("--seed", type=int, default=None, help="override the config seed")
    p_train.add_argument("--out-dir", default=".", help="where to write telemetry.csv and final.wsnp")
    p_train.set_defaults(func=cmd_train)

    p_rmt = sub.add_parser("rmt", help="verify the decay-exponent vs tail-exponent relation")
    p_rmt.add_argument("--q", required=True, help="matrix sizes, e.g. 64,256,1024")
    p_rmt.add_argument("--s", required=True, help="decay exponents, e.g. 0.5:3.0:0.25 or 1.0,2.0")
    p_rmt.add_argument("--out", default=None, help="CSV output path (default: stdout)")
    p_rmt.add_argument("--seed", type=int, default=0)
    p_rmt.set_defaults(func=cmd_rmt)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except TempbalError as exc:  # pragma: no cover - safety net
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())

"""Command-line front end: simulate streams, run rules, export figures.

Subcommands
-----------
* ``simulate`` — write a simulated stream (and its truth sidecar) from
  a config.
* ``run``      — run every configured rule over a stream (simulated or
  given), one run directory per rule; multi-replication configs run the
  whole batch.
* ``plotdata`` — turn run directories into tidy figure CSVs and render
  the figures next to them.
* ``em-fit``   — fit state-noise covariance and observation variance to
  a CSV by EM.

Exit codes: 0 success, 1 runtime error, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import csv
import json
import re
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import load_config, save_config
from .kalman import em_fit
from .models import StateSpaceModel, load_stream_csv, save_stream_csv, save_truth_csv
from .presets import make_stream, run_experiment, run_replications
from .plots import (
    plot_cumulative_error,
    plot_mse_distribution,
    plot_prediction_vs_truth,
    plot_weight_trajectories,
)
from .records import RunRecord, export_weight_trajectories, f17, load_run

__all__ = ["main", "build_parser"]


def _existing(raw: str) -> Path:
    path = Path(raw)
    if not path.exists():
        raise ValueError(f"no such file: {path}")
    return path


def _load_config(args):
    config = load_config(_existing(args.config))
    if getattr(args, "seed", None) is not None:
        config = replace(config, seed=args.seed)
    return config


def _cmd_simulate(args) -> int:
    config = _load_config(args)
    stream = make_stream(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_stream_csv(stream, out / "stream.csv")
    save_truth_csv(stream, out / "truth.csv")
    save_config(config, out / "config.json")
    print(f"wrote {out / 'stream.csv'} ({stream.T} steps, {stream.n_features} covariates)")
    print(f"wrote {out / 'truth.csv'}")
    return 0


def _cmd_run(args) -> int:
    config = _load_config(args)
    out = Path(args.out) if args.out is not None else (
        Path(config.out_dir) if config.out_dir is not None else None
    )
    if out is None:
        raise ValueError("give --out or set out_dir in the config")
    if config.replications > 1:
        if args.stream is not None:
            raise ValueError("--stream cannot be combined with a multi-replication config")
        rows = run_replications(config, outdir=out, threads=args.threads)
        save_config(config, out / "config.json")
        by_rule: dict[str, list[float]] = {}
        for row in rows:
            by_rule.setdefault(row["rule"], []).append(row["mse"])
        print(f"ran {config.replications} replications")
        for rule in sorted(by_rule):
            print(f"{rule}: median mse={np.median(by_rule[rule]):.6g}")
        print(f"wrote {out / 'replications.csv'}")
        return 0

    stream = None
    if args.stream is not None:
        stream = load_stream_csv(_existing(args.stream))
        expected = tuple(config.model.covariate_names)
        if stream.names is not None and tuple(stream.names) != expected:
            raise ValueError(
                f"stream covariates {stream.names} do not match config covariates {expected}"
            )
    results = run_experiment(config, stream=stream, outdir=out)
    save_config(config, out / "config.json")
    for label in sorted(results):
        report = results[label][1]
        print(
            f"{label}: mse={report.mse:.6g} "
            f"(best expert {report.mse_best_expert:.6g}, "
            f"best convex {report.best_convex_mse:.6g})"
        )
    print(f"wrote {len(results)} run directories under {out}")
    return 0


def _safe_label(label: str) -> str:
    return re.sub(r"[^\w.+-]", "_", label)


def _add_record(records: dict[str, RunRecord], label: str, record: RunRecord) -> None:
    base = label
    n = 2
    while label in records:
        label = f"{base}#{n}"
        n += 1
    records[label] = record


def _read_replication_rows(path: Path) -> list[dict]:
    with path.open(newline="") as fh:
        return [
            {
                "replication": int(row["replication"]),
                "rule": row["rule"],
                "mse": float(row["mse"]),
            }
            for row in csv.DictReader(fh)
        ]


def _write_cumulative_csv(records: dict[str, RunRecord], path: Path) -> Path:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "rule", "cum_sq_error"])
        for label in sorted(records):
            record = records[label]
            cum = np.cumsum(record.sq_error[record.eval_slice])
            for i, t in enumerate(range(record.eval_start, record.T + 1)):
                writer.writerow([t, label, f17(cum[i])])
    return path


def _write_predictions_csv(records: dict[str, RunRecord], path: Path) -> Path:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "rule", "y", "y_hat"])
        for label in sorted(records):
            record = records[label]
            for t in range(record.eval_start - 1, record.T):
                writer.writerow([t + 1, label, f17(record.y[t]), f17(record.y_hat[t])])
    return path


def _write_mse_csv(rows: list[dict], path: Path) -> Path:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["replication", "rule", "mse"])
        for row in sorted(rows, key=lambda r: (r["replication"], r["rule"])):
            writer.writerow([row["replication"], row["rule"], f17(row["mse"])])
    return path


def _cmd_plotdata(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records: dict[str, RunRecord] = {}
    batch_rows: list[dict] = []
    for raw in args.run_dirs:
        path = Path(raw)
        if not path.is_dir():
            raise ValueError(f"missing run directory: {path}")
        found = False
        if (path / "steps.csv").exists():
            _add_record(records, path.name, load_run(path)[0])
            found = True
        else:
            for sub in sorted(path.iterdir()):
                if sub.is_dir() and (sub / "steps.csv").exists():
                    _add_record(records, sub.name, load_run(sub)[0])
                    found = True
        if (path / "replications.csv").exists():
            batch_rows.extend(_read_replication_rows(path / "replications.csv"))
            found = True
        if not found:
            raise ValueError(
                f"{path} contains no runs (steps.csv) and no batches (replications.csv)"
            )

    written: list[Path] = []
    if records:
        written.append(_write_cumulative_csv(records, out / "cumulative_error.csv"))
        written.append(_write_predictions_csv(records, out / "predictions.csv"))
        written.append(plot_cumulative_error(records, out / "cumulative_error.png"))
        for label in sorted(records):
            record = records[label]
            tag = _safe_label(label)
            wpath = out / f"weights_{tag}.csv"
            export_weight_trajectories(record, wpath)
            written.append(wpath)
            written.append(plot_weight_trajectories(record, out / f"weights_{tag}.png"))
            written.append(
                plot_prediction_vs_truth(record, out / f"predictions_{tag}.png")
            )
    if batch_rows:
        written.append(_write_mse_csv(batch_rows, out / "mse_by_replication.csv"))
        written.append(plot_mse_distribution(batch_rows, out / "mse_distribution.png"))
    for p in written:
        print(f"wrote {p}")
    return 0


def _cmd_em_fit(args) -> int:
    stream = load_stream_csv(
        _existing(args.data), response=args.response, normalize=args.normalize
    )
    d = stream.n_features
    init = StateSpaceModel(
        K=np.eye(d),
        Q=0.1 * np.eye(d),
        sigma2=max(float(np.var(stream.y)), 1e-8),
        theta0=np.zeros(d),
        P0=np.eye(d),
    )
    fit = em_fit(
        stream.X,
        stream.y,
        init=init,
        n_iter=args.n_iter,
        tol=args.tol,
        update_theta0=True,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        "converged": fit.converged,
        "n_iterations": len(fit.logliks),
        "loglik": [float(v) for v in fit.logliks],
        "sigma2": float(fit.model.sigma2),
        "theta0": [float(v) for v in fit.model.theta0],
        "Q": [[float(v) for v in row] for row in fit.model.Q],
        "covariates": None if stream.names is None else list(stream.names),
        "response": args.response,
        "normalized": args.normalize,
    }
    (out / "em_fit.json").write_text(json.dumps(payload, indent=2) + "\n")
    print(
        f"log-likelihood {fit.logliks[-1]:.6f} after {len(fit.logliks)} "
        f"iterations (converged={fit.converged})"
    )
    print(f"sigma2={fit.model.sigma2:.6g}")
    print(f"wrote {out / 'em_fit.json'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kao",
        description="Online aggregation of Kalman-filter experts.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate a stream from a config")
    p.add_argument("--config", required=True, help="experiment config (JSON)")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("run", help="run the configured aggregation rules")
    p.add_argument("--config", required=True, help="experiment config (JSON)")
    p.add_argument(
        "--stream", default=None, help="run on this stream CSV instead of simulating"
    )
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", default=None, help="output directory (or out_dir in the config)")
    p.add_argument("--threads", type=int, default=1, help="parallel replications")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser(
        "plotdata",
        help="emit figure CSVs from run directories and render the figures",
    )
    p.add_argument("run_dirs", nargs="+", metavar="RUN_DIR")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_plotdata)

    p = sub.add_parser(
        "em-fit",
        help="fit state-noise covariance and observation variance to CSV data",
    )
    p.add_argument("--data", required=True, help="input CSV (header row required)")
    p.add_argument("--response", default="y", help="response column name")
    p.add_argument(
        "--normalize", action="store_true", help="min-max scale covariates to [0, 1]"
    )
    p.add_argument("--n-iter", type=int, default=50, help="maximum EM iterations")
    p.add_argument("--tol", type=float, default=1e-8, help="log-likelihood stop tolerance")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_em_fit)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary: report, don't crash
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())

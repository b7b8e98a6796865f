"""Run records and their on-disk layout.

A run directory holds three artifacts:

* ``config.json``  — the experiment configuration (with its hash);
* ``steps.csv``    — one row per step: observation, aggregate
  prediction, squared error, and per-expert prediction/risk/weight/
  pseudo-loss/rate columns;
* ``summary.json`` — metrics and run metadata.

Floats are written with 17 significant digits so that a reloaded run
reproduces the in-memory arrays bit for bit.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "RunRecord",
    "save_run",
    "load_run",
    "export_weight_trajectories",
    "f17",
]


def f17(v: float) -> str:
    """Format a float with 17 significant digits (lossless round-trip)."""
    return format(float(v), ".17g")


@dataclass(frozen=True)
class RunRecord:
    """Everything one aggregation run produced, step by step.

    ``rho[t]`` are the weights *used* for the prediction at step t+1
    (1-based step t), i.e. computed from information up to t-1.
    ``pseudo[t]`` rows before ``agg_start`` are zero: the rule was not
    updating yet.  ``mu``/``sigma2_true`` are present when the stream
    carried simulation ground truth.
    """

    rule: str
    y: np.ndarray
    y_hat: np.ndarray
    y_hat_experts: np.ndarray
    risk: np.ndarray
    rho: np.ndarray
    pseudo: np.ndarray
    eta: np.ndarray
    sigma2_hat: np.ndarray
    expert_names: tuple[str, ...]
    eval_start: int = 1
    agg_start: int = 1
    seed: int | None = None
    config_hash: str | None = None
    mu: np.ndarray | None = None
    sigma2_true: float | None = None
    extras: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        T, M = np.asarray(self.y_hat_experts).shape
        for name in ("y", "y_hat"):
            arr = np.asarray(getattr(self, name), dtype=float).reshape(-1)
            if arr.shape[0] != T:
                raise ValueError(f"{name} has length {arr.shape[0]}, expected {T}")
            object.__setattr__(self, name, arr)
        for name in ("y_hat_experts", "risk", "rho", "pseudo", "eta"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (T, M):
                raise ValueError(f"{name} has shape {arr.shape}, expected {(T, M)}")
            object.__setattr__(self, name, arr)
        sig = np.asarray(self.sigma2_hat, dtype=float).reshape(-1)
        if sig.shape[0] != M:
            raise ValueError(f"sigma2_hat has length {sig.shape[0]}, expected {M}")
        object.__setattr__(self, "sigma2_hat", sig)
        names = tuple(str(n) for n in self.expert_names)
        if len(names) != M:
            raise ValueError(f"{len(names)} expert names for {M} experts")
        object.__setattr__(self, "expert_names", names)
        if self.mu is not None:
            mu = np.asarray(self.mu, dtype=float).reshape(-1)
            if mu.shape[0] != T:
                raise ValueError(f"mu has length {mu.shape[0]}, expected {T}")
            object.__setattr__(self, "mu", mu)
        if not 1 <= self.eval_start <= T:
            raise ValueError(f"eval_start must lie in [1, {T}], got {self.eval_start}")
        if not 1 <= self.agg_start <= T + 1:
            raise ValueError(f"agg_start must lie in [1, {T + 1}], got {self.agg_start}")

    @property
    def T(self) -> int:
        return self.y.shape[0]

    @property
    def n_experts(self) -> int:
        return self.y_hat_experts.shape[1]

    @property
    def sq_error(self) -> np.ndarray:
        return (self.y - self.y_hat) ** 2

    @property
    def eval_slice(self) -> slice:
        return slice(self.eval_start - 1, self.T)


def save_run(
    record: RunRecord,
    outdir: str | Path,
    config: dict | None = None,
    summary: dict | None = None,
) -> Path:
    """Write a run directory (config.json, steps.csv, summary.json)."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    if config is not None:
        (outdir / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")

    M = record.n_experts
    header = ["t", "y", "y_hat", "sq_error"]
    if record.mu is not None:
        header.append("mu")
    for stem in ("y_hat", "risk", "rho", "pseudo", "eta"):
        header.extend(f"{stem}_e{i}" for i in range(M))
    sq = record.sq_error
    with (outdir / "steps.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for t in range(record.T):
            row = [t + 1, f17(record.y[t]), f17(record.y_hat[t]), f17(sq[t])]
            if record.mu is not None:
                row.append(f17(record.mu[t]))
            for arr in (record.y_hat_experts, record.risk, record.rho, record.pseudo, record.eta):
                row.extend(f17(v) for v in arr[t])
            writer.writerow(row)

    meta = {
        "rule": record.rule,
        "expert_names": list(record.expert_names),
        "sigma2_hat": [f17(v) for v in record.sigma2_hat],
        "eval_start": record.eval_start,
        "agg_start": record.agg_start,
        "seed": record.seed,
        "config_hash": record.config_hash,
        "sigma2_true": None if record.sigma2_true is None else f17(record.sigma2_true),
        "extras": record.extras,
    }
    payload = {"meta": meta, "metrics": summary or {}}
    (outdir / "summary.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return outdir


def load_run(outdir: str | Path) -> tuple[RunRecord, dict | None, dict]:
    """Reload a run directory; inverse of :func:`save_run`."""
    outdir = Path(outdir)
    payload = json.loads((outdir / "summary.json").read_text())
    meta = payload["meta"]
    config = None
    cfg_path = outdir / "config.json"
    if cfg_path.exists():
        config = json.loads(cfg_path.read_text())

    with (outdir / "steps.csv").open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [row for row in reader if row]
    col = {name: i for i, name in enumerate(header)}
    data = np.array([[float(v) for v in row] for row in rows])
    M = len(meta["expert_names"])

    def block(stem: str) -> np.ndarray:
        idx = [col[f"{stem}_e{i}"] for i in range(M)]
        return data[:, idx]

    record = RunRecord(
        rule=meta["rule"],
        y=data[:, col["y"]],
        y_hat=data[:, col["y_hat"]],
        y_hat_experts=block("y_hat"),
        risk=block("risk"),
        rho=block("rho"),
        pseudo=block("pseudo"),
        eta=block("eta"),
        sigma2_hat=np.array([float(v) for v in meta["sigma2_hat"]]),
        expert_names=tuple(meta["expert_names"]),
        eval_start=int(meta["eval_start"]),
        agg_start=int(meta["agg_start"]),
        seed=meta["seed"],
        config_hash=meta["config_hash"],
        mu=data[:, col["mu"]] if "mu" in col else None,
        sigma2_true=None if meta["sigma2_true"] is None else float(meta["sigma2_true"]),
        extras=meta.get("extras", {}),
    )
    return record, config, payload.get("metrics", {})


def export_weight_trajectories(record: RunRecord, path: str | Path) -> None:
    """Write the long-format weight trajectory CSV.

    Columns: ``t, rule, expert_id, rho, eta, pseudo_loss``.
    """
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "rule", "expert_id", "rho", "eta", "pseudo_loss"])
        for t in range(record.T):
            for m in range(record.n_experts):
                writer.writerow(
                    [
                        t + 1,
                        record.rule,
                        record.expert_names[m],
                        f17(record.rho[t, m]),
                        f17(record.eta[t, m]),
                        f17(record.pseudo[t, m]),
                    ]
                )

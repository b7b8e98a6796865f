"""Experiment configuration: typed schema, strict JSON I/O, content hash.

Configs are plain JSON documents with a fixed nesting.  Parsing is
strict — an unknown key at any level raises — so a typo in a config
file fails loudly instead of silently running defaults.  The content
hash is the sha256 of the canonical JSON form and is stamped into run
records so outputs can be traced back to the exact configuration.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .aggregation import RULES

__all__ = [
    "SCHEMA_VERSION",
    "Theta0Spec",
    "ModelSpec",
    "BankSpec",
    "RuleSpec",
    "ProtocolSpec",
    "ExperimentConfig",
    "load_config",
    "save_config",
]

SCHEMA_VERSION = 1


def _reject_unknown(payload: dict, where: str, allowed: set[str]) -> None:
    if not isinstance(payload, dict):
        raise ValueError(f"{where} must be a JSON object, got {type(payload).__name__}")
    unknown = set(payload) - allowed
    if unknown:
        raise ValueError(f"unknown {where} keys: {', '.join(sorted(unknown))}")


def _opt_float_tuple(values) -> tuple[float, ...] | None:
    if values is None:
        return None
    return tuple(float(v) for v in values)


@dataclass(frozen=True)
class Theta0Spec:
    """Initial state of the data-generating process.

    ``fixed`` uses ``value`` verbatim; ``gaussian`` draws the initial
    state once per replication as N(mean * 1, scale^2 * I).
    """

    mode: str = "fixed"
    value: tuple[float, ...] | None = None
    mean: float = 0.0
    scale: float = 1.0

    def __post_init__(self) -> None:
        if self.mode not in ("fixed", "gaussian"):
            raise ValueError(f"theta0 mode must be 'fixed' or 'gaussian', got {self.mode!r}")
        if self.mode == "fixed" and self.value is None:
            raise ValueError("theta0 mode 'fixed' requires a value")
        if self.value is not None:
            object.__setattr__(self, "value", _opt_float_tuple(self.value))
        if self.scale < 0:
            raise ValueError(f"theta0 scale must be nonnegative, got {self.scale}")

    def to_dict(self) -> dict:
        out: dict = {"mode": self.mode}
        if self.mode == "fixed":
            out["value"] = list(self.value)
        else:
            out["mean"] = self.mean
            out["scale"] = self.scale
        return out

    @classmethod
    def from_dict(cls, payload: dict) -> "Theta0Spec":
        _reject_unknown(payload, "theta0", {"mode", "value", "mean", "scale"})
        return cls(
            mode=payload.get("mode", "fixed"),
            value=payload.get("value"),
            mean=float(payload.get("mean", 0.0)),
            scale=float(payload.get("scale", 1.0)),
        )


@dataclass(frozen=True)
class ModelSpec:
    """Data-generating process: covariates plus the true state model.

    Covariates are i.i.d. uniform on [0, 1]; the response loads only on
    ``true_subset`` of them.  The true state dynamics use K = k_scale*I
    and the equicorrelated Q built from (q_diag, q_offdiag).
    """

    covariate_names: tuple[str, ...]
    true_subset: tuple[int, ...]
    q_diag: float = 1.0
    q_offdiag: float = 0.9
    sigma2: float = 1.0
    k_scale: float = 1.0
    theta0: Theta0Spec = field(default_factory=lambda: Theta0Spec(mode="fixed", value=(0.0,)))
    covariate_dist: str = "uniform"

    def __post_init__(self) -> None:
        object.__setattr__(self, "covariate_names", tuple(str(n) for n in self.covariate_names))
        object.__setattr__(self, "true_subset", tuple(int(i) for i in self.true_subset))
        if len(self.covariate_names) == 0:
            raise ValueError("covariate_names must be non-empty")
        if len(set(self.covariate_names)) != len(self.covariate_names):
            raise ValueError("duplicate covariate names")
        if len(self.true_subset) == 0:
            raise ValueError("true_subset must be non-empty")
        n = len(self.covariate_names)
        if any(i < 0 or i >= n for i in self.true_subset):
            raise ValueError(f"true_subset {self.true_subset} indexes outside the {n} covariates")
        if len(set(self.true_subset)) != len(self.true_subset):
            raise ValueError("true_subset repeats a covariate")
        if self.covariate_dist != "uniform":
            raise ValueError(f"unsupported covariate_dist {self.covariate_dist!r}")
        if self.sigma2 <= 0:
            raise ValueError(f"sigma2 must be positive, got {self.sigma2}")
        if self.theta0.mode == "fixed" and len(self.theta0.value) != len(self.true_subset):
            raise ValueError(
                f"fixed theta0 has {len(self.theta0.value)} entries for a "
                f"{len(self.true_subset)}-dimensional true model"
            )

    def to_dict(self) -> dict:
        return {
            "covariate_names": list(self.covariate_names),
            "true_subset": list(self.true_subset),
            "q_diag": self.q_diag,
            "q_offdiag": self.q_offdiag,
            "sigma2": self.sigma2,
            "k_scale": self.k_scale,
            "theta0": self.theta0.to_dict(),
            "covariate_dist": self.covariate_dist,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "ModelSpec":
        _reject_unknown(
            payload,
            "model",
            {
                "covariate_names",
                "true_subset",
                "q_diag",
                "q_offdiag",
                "sigma2",
                "k_scale",
                "theta0",
                "covariate_dist",
            },
        )
        if "covariate_names" not in payload or "true_subset" not in payload:
            raise ValueError("model requires covariate_names and true_subset")
        theta0 = payload.get("theta0")
        return cls(
            covariate_names=tuple(payload["covariate_names"]),
            true_subset=tuple(payload["true_subset"]),
            q_diag=float(payload.get("q_diag", 1.0)),
            q_offdiag=float(payload.get("q_offdiag", 0.9)),
            sigma2=float(payload.get("sigma2", 1.0)),
            k_scale=float(payload.get("k_scale", 1.0)),
            theta0=Theta0Spec.from_dict(theta0)
            if theta0 is not None
            else Theta0Spec(mode="fixed", value=(0.0,)),
            covariate_dist=payload.get("covariate_dist", "uniform"),
        )


@dataclass(frozen=True)
class BankSpec:
    """Expert bank: explicit covariate subsets plus a shared template."""

    subsets: tuple[tuple[int, ...], ...]
    q_diag: float = 1.0
    q_offdiag: float = 0.9
    sigma2: float = 1.0
    theta0: float = 0.0
    p0_scale: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "subsets", tuple(tuple(int(i) for i in s) for s in self.subsets)
        )
        if len(self.subsets) == 0:
            raise ValueError("bank requires at least one subset")

    def to_dict(self) -> dict:
        return {
            "subsets": [list(s) for s in self.subsets],
            "q_diag": self.q_diag,
            "q_offdiag": self.q_offdiag,
            "sigma2": self.sigma2,
            "theta0": self.theta0,
            "p0_scale": self.p0_scale,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "BankSpec":
        _reject_unknown(
            payload,
            "bank",
            {"subsets", "q_diag", "q_offdiag", "sigma2", "theta0", "p0_scale"},
        )
        if "subsets" not in payload:
            raise ValueError("bank requires subsets")
        return cls(
            subsets=tuple(tuple(s) for s in payload["subsets"]),
            q_diag=float(payload.get("q_diag", 1.0)),
            q_offdiag=float(payload.get("q_offdiag", 0.9)),
            sigma2=float(payload.get("sigma2", 1.0)),
            theta0=float(payload.get("theta0", 0.0)),
            p0_scale=float(payload.get("p0_scale", 1.0)),
        )


@dataclass(frozen=True)
class RuleSpec:
    """One aggregation rule to run, with its rate configuration.

    ``eta_grid`` (fixed-rate rules: kao-ms, kao-grad, ewa) asks the
    runner to try each candidate rate and keep the one with the
    smallest evaluation MSE; the selection is recorded in the run
    summary.  This mirrors a tuned deployment and is post hoc by
    construction.
    """

    rule: str
    eta: float | None = None
    etas: tuple[float, ...] | None = None
    eta_grid: tuple[float, ...] | None = None
    grad_bound: float | None = None
    rho_tilde0: tuple[float, ...] | None = None
    gradient_trick: bool = False
    rate_mode: str = "fixed"
    label: str | None = None

    def __post_init__(self) -> None:
        if self.rule not in RULES:
            raise ValueError(f"unknown rule {self.rule!r}; valid rules: {', '.join(RULES)}")
        if self.eta_grid is not None and self.rule not in ("kao-ms", "kao-grad", "ewa"):
            raise ValueError("eta_grid is only supported for kao-ms, kao-grad, and ewa")
        if self.eta_grid is not None and self.rate_mode != "fixed":
            raise ValueError("eta_grid requires rate_mode='fixed'")
        if self.eta_grid is not None and len(self.eta_grid) == 0:
            raise ValueError("eta_grid must be non-empty")
        object.__setattr__(self, "etas", _opt_float_tuple(self.etas))
        object.__setattr__(self, "eta_grid", _opt_float_tuple(self.eta_grid))
        object.__setattr__(self, "rho_tilde0", _opt_float_tuple(self.rho_tilde0))

    @property
    def run_label(self) -> str:
        return self.label or self.rule

    def to_dict(self) -> dict:
        out: dict = {"rule": self.rule}
        for key in ("eta", "grad_bound", "label"):
            val = getattr(self, key)
            if val is not None:
                out[key] = val
        for key in ("etas", "eta_grid", "rho_tilde0"):
            val = getattr(self, key)
            if val is not None:
                out[key] = list(val)
        if self.gradient_trick:
            out["gradient_trick"] = True
        if self.rate_mode != "fixed":
            out["rate_mode"] = self.rate_mode
        return out

    @classmethod
    def from_dict(cls, payload: dict) -> "RuleSpec":
        _reject_unknown(
            payload,
            "rule",
            {
                "rule",
                "eta",
                "etas",
                "eta_grid",
                "grad_bound",
                "rho_tilde0",
                "gradient_trick",
                "rate_mode",
                "label",
            },
        )
        if "rule" not in payload:
            raise ValueError("rule entry requires a rule name")
        return cls(
            rule=payload["rule"],
            eta=None if payload.get("eta") is None else float(payload["eta"]),
            etas=payload.get("etas"),
            eta_grid=payload.get("eta_grid"),
            grad_bound=None
            if payload.get("grad_bound") is None
            else float(payload["grad_bound"]),
            rho_tilde0=payload.get("rho_tilde0"),
            gradient_trick=bool(payload.get("gradient_trick", False)),
            rate_mode=payload.get("rate_mode", "fixed"),
            label=payload.get("label"),
        )


@dataclass(frozen=True)
class ProtocolSpec:
    """Run protocol: windowing, refits, and evaluation bookkeeping.

    ``warm_start`` treats the first window (or burn-in stretch) as an
    in-sample training segment: expert predictions over it are replayed
    under the parameters fitted at its end, aggregation weights update
    from step 1, and evaluation defaults to starting right after it.
    Requires either ``refit='em'`` or ``sigma2_mode='burn-in'`` so there
    is a fitting event to warm up on.
    """

    window: int | None = None
    refit: str = "none"
    burn_in: int = 0
    sigma2_mode: str = "model"
    warm_start: bool = False
    eval_start: int | None = None
    agg_start: int | None = None
    em_iters: int = 8
    em_tol: float = 1e-4
    split_fraction: float = 0.5

    def __post_init__(self) -> None:
        if self.refit not in ("none", "em"):
            raise ValueError(f"refit must be 'none' or 'em', got {self.refit!r}")
        if self.refit == "em" and self.window is None:
            raise ValueError("refit='em' requires a window")
        if self.sigma2_mode not in ("model", "burn-in"):
            raise ValueError(f"sigma2_mode must be 'model' or 'burn-in', got {self.sigma2_mode!r}")
        if self.sigma2_mode == "burn-in" and self.burn_in < 1:
            raise ValueError("sigma2_mode='burn-in' requires burn_in >= 1")
        if self.warm_start and self.refit != "em" and self.sigma2_mode != "burn-in":
            raise ValueError("warm_start requires refit='em' or sigma2_mode='burn-in'")
        if self.window is not None and self.window < 1:
            raise ValueError(f"window must be positive, got {self.window}")
        if self.em_iters < 1:
            raise ValueError(f"em_iters must be positive, got {self.em_iters}")
        if not 0.0 < self.split_fraction < 1.0:
            raise ValueError(f"split_fraction must lie in (0, 1), got {self.split_fraction}")

    def to_dict(self) -> dict:
        return {
            "window": self.window,
            "refit": self.refit,
            "burn_in": self.burn_in,
            "sigma2_mode": self.sigma2_mode,
            "warm_start": self.warm_start,
            "eval_start": self.eval_start,
            "agg_start": self.agg_start,
            "em_iters": self.em_iters,
            "em_tol": self.em_tol,
            "split_fraction": self.split_fraction,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "ProtocolSpec":
        _reject_unknown(
            payload,
            "protocol",
            {
                "window",
                "refit",
                "burn_in",
                "sigma2_mode",
                "warm_start",
                "eval_start",
                "agg_start",
                "em_iters",
                "em_tol",
                "split_fraction",
            },
        )
        return cls(
            window=None if payload.get("window") is None else int(payload["window"]),
            refit=payload.get("refit", "none"),
            burn_in=int(payload.get("burn_in", 0)),
            sigma2_mode=payload.get("sigma2_mode", "model"),
            warm_start=bool(payload.get("warm_start", False)),
            eval_start=None if payload.get("eval_start") is None else int(payload["eval_start"]),
            agg_start=None if payload.get("agg_start") is None else int(payload["agg_start"]),
            em_iters=int(payload.get("em_iters", 8)),
            em_tol=float(payload.get("em_tol", 1e-4)),
            split_fraction=float(payload.get("split_fraction", 0.5)),
        )


@dataclass(frozen=True)
class ExperimentConfig:
    """Top-level experiment: generator, bank, rules, protocol."""

    name: str
    seed: int
    n_steps: int
    model: ModelSpec
    bank: BankSpec
    rules: tuple[RuleSpec, ...]
    protocol: ProtocolSpec = field(default_factory=ProtocolSpec)
    replications: int = 1
    out_dir: str | None = None
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self) -> None:
        if self.schema_version != SCHEMA_VERSION:
            raise ValueError(
                f"unsupported schema_version {self.schema_version} (expected {SCHEMA_VERSION})"
            )
        if self.n_steps < 1:
            raise ValueError(f"n_steps must be positive, got {self.n_steps}")
        if self.replications < 1:
            raise ValueError(f"replications must be positive, got {self.replications}")
        if len(self.rules) == 0:
            raise ValueError("at least one rule is required")
        labels = [r.run_label for r in self.rules]
        if len(set(labels)) != len(labels):
            raise ValueError(f"duplicate rule labels: {labels}")
        object.__setattr__(self, "rules", tuple(self.rules))
        n = len(self.model.covariate_names)
        for s in self.bank.subsets:
            if any(i < 0 or i >= n for i in s):
                raise ValueError(f"bank subset {s} indexes outside the {n} covariates")

    def to_dict(self) -> dict:
        out = {
            "schema_version": self.schema_version,
            "name": self.name,
            "seed": self.seed,
            "n_steps": self.n_steps,
            "replications": self.replications,
            "model": self.model.to_dict(),
            "bank": self.bank.to_dict(),
            "rules": [r.to_dict() for r in self.rules],
            "protocol": self.protocol.to_dict(),
        }
        if self.out_dir is not None:
            out["out_dir"] = self.out_dir
        return out

    @classmethod
    def from_dict(cls, payload: dict) -> "ExperimentConfig":
        _reject_unknown(
            payload,
            "config",
            {
                "schema_version",
                "name",
                "seed",
                "n_steps",
                "replications",
                "model",
                "bank",
                "rules",
                "protocol",
                "out_dir",
            },
        )
        for key in ("name", "seed", "n_steps", "model", "bank", "rules"):
            if key not in payload:
                raise ValueError(f"config requires {key}")
        rules = payload["rules"]
        if not isinstance(rules, list):
            raise ValueError("rules must be a list")
        return cls(
            name=str(payload["name"]),
            seed=int(payload["seed"]),
            n_steps=int(payload["n_steps"]),
            replications=int(payload.get("replications", 1)),
            model=ModelSpec.from_dict(payload["model"]),
            bank=BankSpec.from_dict(payload["bank"]),
            rules=tuple(RuleSpec.from_dict(r) for r in rules),
            protocol=ProtocolSpec.from_dict(payload.get("protocol", {})),
            out_dir=None if payload.get("out_dir") is None else str(payload["out_dir"]),
            schema_version=int(payload.get("schema_version", SCHEMA_VERSION)),
        )

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()


def load_config(path: str | Path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    return ExperimentConfig.from_dict(payload)


def save_config(config: ExperimentConfig, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")

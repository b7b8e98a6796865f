"""Linear-Gaussian state-space models, stream containers, and simulation.

The generative model used throughout this package is

    theta_t = K theta_{t-1} + z_t,      z_t ~ N(0, Q),
    y_t     = x_t' theta_t + eps_t,     eps_t ~ N(0, sigma2),

with a deterministic initial state vector ``theta0`` and scalar
observations.  ``P0`` is the covariance the filtering recursion assigns
to ``theta0``; it is a tuning input of the filter, not part of the
generative model, so simulation ignores it.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "PSD_TOL",
    "StateSpaceModel",
    "ObservationStream",
    "simulate_ssm",
    "predictive_moments",
    "check_mean_variance_identity",
    "psd_sqrt",
    "load_stream_csv",
    "save_stream_csv",
    "save_truth_csv",
    "minmax_normalize",
]

# Absolute tolerance for symmetry / positive-semidefiniteness checks.
PSD_TOL = 1e-10


def _as_square(a, name: str) -> np.ndarray:
    arr = np.asarray(a, dtype=float)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise ValueError(f"{name} must be a square matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def _check_symmetric_psd(a: np.ndarray, name: str, tol: float = PSD_TOL) -> np.ndarray:
    """Validate symmetry and eigenvalues >= -tol; return the symmetrized matrix."""
    if not np.allclose(a, a.T, atol=tol, rtol=0.0):
        raise ValueError(f"{name} is not symmetric within {tol}")
    sym = 0.5 * (a + a.T)
    min_eig = float(np.linalg.eigvalsh(sym).min())
    if min_eig < -tol:
        raise ValueError(f"{name} has eigenvalue {min_eig:.3e} below -{tol}")
    return sym


def psd_sqrt(a: np.ndarray, tol: float = PSD_TOL) -> np.ndarray:
    """Factor S of a PSD matrix with S S' = a, clamping tiny negative eigenvalues.

    Eigenvalues below ``-tol`` raise; eigenvalues in ``[-tol, 0)`` are
    treated as exact zeros so that degenerate noise covariances (e.g.
    Q = 0 in the static case) can be sampled.
    """
    sym = 0.5 * (np.asarray(a, dtype=float) + np.asarray(a, dtype=float).T)
    eigvals, eigvecs = np.linalg.eigh(sym)
    if eigvals.min() < -tol:
        raise ValueError(f"matrix is not PSD: min eigenvalue {eigvals.min():.3e}")
    return eigvecs * np.sqrt(np.clip(eigvals, 0.0, None))


@dataclass(frozen=True)
class StateSpaceModel:
    """Parameters of a linear-Gaussian state-space model with scalar output.

    Attributes
    ----------
    K : (d, d) transition matrix.
    Q : (d, d) state-noise covariance, symmetric PSD within 1e-10.
    sigma2 : observation-noise variance, > 0.
    theta0 : (d,) initial state vector.
    P0 : (d, d) initial covariance used by the filter, symmetric PSD.
    """

    K: np.ndarray
    Q: np.ndarray
    sigma2: float
    theta0: np.ndarray
    P0: np.ndarray

    def __post_init__(self) -> None:
        K = _as_square(self.K, "K")
        Q = _check_symmetric_psd(_as_square(self.Q, "Q"), "Q")
        P0 = _check_symmetric_psd(_as_square(self.P0, "P0"), "P0")
        theta0 = np.asarray(self.theta0, dtype=float).reshape(-1)
        if not np.all(np.isfinite(theta0)):
            raise ValueError("theta0 contains non-finite entries")
        d = K.shape[0]
        if Q.shape != (d, d) or P0.shape != (d, d) or theta0.shape != (d,):
            raise ValueError(
                "inconsistent dimensions: "
                f"K {K.shape}, Q {Q.shape}, P0 {P0.shape}, theta0 {theta0.shape}"
            )
        sigma2 = float(self.sigma2)
        if not np.isfinite(sigma2) or sigma2 <= 0.0:
            raise ValueError(f"sigma2 must be a positive finite scalar, got {sigma2!r}")
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "P0", P0)
        object.__setattr__(self, "theta0", theta0)
        object.__setattr__(self, "sigma2", sigma2)

    @property
    def dim(self) -> int:
        return self.K.shape[0]

    def replace(self, **kwargs) -> "StateSpaceModel":
        """Return a copy with the given fields replaced (re-validated)."""
        fields = {
            "K": self.K,
            "Q": self.Q,
            "sigma2": self.sigma2,
            "theta0": self.theta0,
            "P0": self.P0,
        }
        fields.update(kwargs)
        return StateSpaceModel(**fields)


@dataclass(frozen=True)
class ObservationStream:
    """A design/response stream, optionally carrying simulation ground truth.

    ``X`` holds one design row per step; experts select sub-vectors of
    each row through their feature maps, so ``X`` may be wider than any
    single model.  ``theta_path`` and ``mu`` are only present for
    simulated streams (``mu[t]`` is the conditional mean x_t' theta_t).
    """

    X: np.ndarray
    y: np.ndarray
    names: tuple[str, ...] | None = None
    theta_path: np.ndarray | None = None
    mu: np.ndarray | None = None

    def __post_init__(self) -> None:
        X = np.asarray(self.X, dtype=float)
        y = np.asarray(self.y, dtype=float).reshape(-1)
        if X.ndim != 2:
            raise ValueError(f"X must be 2-D, got shape {X.shape}")
        if X.shape[0] != y.shape[0]:
            raise ValueError(f"X has {X.shape[0]} rows but y has {y.shape[0]}")
        if X.shape[0] == 0:
            raise ValueError("empty stream")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ValueError("stream contains non-finite values")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        if self.names is not None:
            names = tuple(str(n) for n in self.names)
            if len(names) != X.shape[1]:
                raise ValueError(
                    f"{len(names)} covariate names for {X.shape[1]} columns"
                )
            object.__setattr__(self, "names", names)
        if self.theta_path is not None:
            tp = np.asarray(self.theta_path, dtype=float)
            if tp.shape[0] != y.shape[0]:
                raise ValueError("theta_path length does not match the stream")
            object.__setattr__(self, "theta_path", tp)
        if self.mu is not None:
            mu = np.asarray(self.mu, dtype=float).reshape(-1)
            if mu.shape[0] != y.shape[0]:
                raise ValueError("mu length does not match the stream")
            object.__setattr__(self, "mu", mu)

    @property
    def T(self) -> int:
        return self.y.shape[0]

    @property
    def n_features(self) -> int:
        return self.X.shape[1]


def simulate_ssm(model: StateSpaceModel, X: np.ndarray, seed: int) -> ObservationStream:
    """Simulate a stream from the model along the design ``X``.

    Randomness is split deterministically from ``seed`` via
    ``np.random.SeedSequence(seed).spawn(2)``: child 0 drives the state
    noise, child 1 the observation noise.  Two calls with the same
    arguments produce byte-identical streams.

    Parameters
    ----------
    model : generative parameters; ``model.P0`` is ignored (theta0 is
        deterministic under the generative model).
    X : (T, model.dim) design rows.
    seed : integer seed for the split RNG streams.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != model.dim:
        raise ValueError(f"design must have shape (T, {model.dim}), got {X.shape}")
    T = X.shape[0]
    if T == 0:
        raise ValueError("cannot simulate an empty stream")
    state_seq, obs_seq = np.random.SeedSequence(seed).spawn(2)
    state_rng = np.random.default_rng(state_seq)
    obs_rng = np.random.default_rng(obs_seq)

    S = psd_sqrt(model.Q)
    sd = float(np.sqrt(model.sigma2))
    theta = model.theta0.copy()
    theta_path = np.empty((T, model.dim))
    mu = np.empty(T)
    for t in range(T):
        theta = model.K @ theta + S @ state_rng.standard_normal(model.dim)
        theta_path[t] = theta
        mu[t] = X[t] @ theta
    y = mu + sd * obs_rng.standard_normal(T)
    return ObservationStream(X=X, y=y, theta_path=theta_path, mu=mu)


def predictive_moments(model: StateSpaceModel, x: np.ndarray, t: int) -> tuple[float, float]:
    """Closed-form mean and variance of y_t for a fixed design row ``x``.

    With a deterministic theta0, unrolling the state recursion gives
    theta_t = K^t theta0 + sum_{k=0}^{t-1} K^k z_{t-k}, hence

        E[y_t]   = x' K^t theta0,
        var(y_t) = x' (sum_{k=0}^{t-1} K^k Q K^k') x + sigma2.
    """
    if t < 1:
        raise ValueError(f"t must be >= 1, got {t}")
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape != (model.dim,):
        raise ValueError(f"x must have shape ({model.dim},), got {x.shape}")
    mean_vec = model.theta0.copy()
    cov = np.zeros((model.dim, model.dim))
    for _ in range(t):
        cov = model.K @ cov @ model.K.T + model.Q
        mean_vec = model.K @ mean_vec
    mean = float(x @ mean_vec)
    var = float(x @ cov @ x) + model.sigma2
    return mean, var


def check_mean_variance_identity(
    model: StateSpaceModel,
    X: np.ndarray,
    t: int,
    n_mc: int = 100_000,
    seed: int = 0,
) -> tuple[float, float]:
    """Monte-Carlo check of the closed-form moments of y_t.

    Returns ``(mean_gap, var_gap)``: absolute differences between the
    analytic moments from :func:`predictive_moments` and estimates over
    ``n_mc`` simulated copies of y_t.  Both gaps shrink like
    O(1/sqrt(n_mc)); at n_mc = 1e5 they sit within a few standard
    errors of zero.
    """
    if n_mc < 1000:
        raise ValueError(f"n_mc must be >= 1000 for a usable estimate, got {n_mc}")
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != model.dim:
        raise ValueError(f"design must have shape (T, {model.dim}), got {X.shape}")
    if not 1 <= t <= X.shape[0]:
        raise ValueError(f"t must lie in [1, {X.shape[0]}], got {t}")
    state_seq, obs_seq = np.random.SeedSequence(seed).spawn(2)
    state_rng = np.random.default_rng(state_seq)
    obs_rng = np.random.default_rng(obs_seq)

    S = psd_sqrt(model.Q)
    theta = np.broadcast_to(model.theta0, (n_mc, model.dim)).copy()
    for _ in range(t):
        theta = theta @ model.K.T + state_rng.standard_normal((n_mc, model.dim)) @ S.T
    x = X[t - 1]
    y = theta @ x + np.sqrt(model.sigma2) * obs_rng.standard_normal(n_mc)
    mean, var = predictive_moments(model, x, t)
    return abs(float(y.mean()) - mean), abs(float(y.var(ddof=1)) - var)


# ---------------------------------------------------------------------------
# CSV ingestion / emission
# ---------------------------------------------------------------------------

def _f17(v: float) -> str:
    """Format a float with 17 significant digits (lossless round-trip)."""
    return format(float(v), ".17g")


def minmax_normalize(X: np.ndarray) -> np.ndarray:
    """Min-max normalize each column to [0, 1]; constant columns map to 0."""
    X = np.asarray(X, dtype=float)
    lo = X.min(axis=0)
    hi = X.max(axis=0)
    span = hi - lo
    out = np.zeros_like(X)
    ok = span > 0
    out[:, ok] = (X[:, ok] - lo[ok]) / span[ok]
    return out


def load_stream_csv(
    path: str | Path,
    response: str = "y",
    normalize: bool = False,
) -> ObservationStream:
    """Load a design/response stream from a headed CSV file.

    A column named ``t`` is treated as a step index and dropped; the
    ``response`` column becomes ``y``; every other column is a covariate.
    With ``normalize=True`` the covariate columns are min-max scaled to
    [0, 1] before the stream is built.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        rows = [row for row in reader if row]
    header = [h.strip() for h in header]
    if response not in header:
        raise ValueError(f"{path}: no column named {response!r} in header {header}")
    y_col = header.index(response)
    drop = {y_col}
    if "t" in header:
        drop.add(header.index("t"))
    cov_cols = [i for i in range(len(header)) if i not in drop]
    if not cov_cols:
        raise ValueError(f"{path}: no covariate columns")
    try:
        data = np.array([[float(v) for v in row] for row in rows])
    except ValueError as exc:
        raise ValueError(f"{path}: non-numeric cell ({exc})") from None
    if data.ndim != 2 or data.shape[1] != len(header):
        raise ValueError(f"{path}: ragged rows")
    X = data[:, cov_cols]
    if normalize:
        X = minmax_normalize(X)
    return ObservationStream(
        X=X, y=data[:, y_col], names=tuple(header[i] for i in cov_cols)
    )


def save_stream_csv(stream: ObservationStream, path: str | Path) -> None:
    """Write a stream as CSV with columns ``t, <covariates...>, y``."""
    path = Path(path)
    names = stream.names or tuple(f"x{i}" for i in range(stream.n_features))
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", *names, "y"])
        for t in range(stream.T):
            writer.writerow(
                [t + 1, *(_f17(v) for v in stream.X[t]), _f17(stream.y[t])]
            )


def save_truth_csv(stream: ObservationStream, path: str | Path) -> None:
    """Write the simulation ground truth sidecar (t, mu, theta components)."""
    if stream.mu is None or stream.theta_path is None:
        raise ValueError("stream has no simulation ground truth to save")
    path = Path(path)
    d = stream.theta_path.shape[1]
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "mu", *(f"theta_{i}" for i in range(d))])
        for t in range(stream.T):
            writer.writerow(
                [t + 1, _f17(stream.mu[t]), *(_f17(v) for v in stream.theta_path[t])]
            )

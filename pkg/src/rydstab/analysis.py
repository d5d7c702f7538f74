"""Power-law and cross-distance scaling fits of logical error rates.

Per distance, log p_L = A + nu log(gamma) by weighted least squares.
Across distances, nu = alpha d, then A = log(c) - log(gamma_th) nu, so that
p_L = c (gamma / gamma_th)^(alpha d).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import statsmodels.api as sm
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

DEFAULT_WINDOW = (1e-4, 1e-3)
MIN_FAILURES = 10
Z95 = 1.959963984540054


class FitError(ValueError):
    pass


@dataclass(frozen=True)
class FitPoint:
    gamma: float
    p_L: float
    sigma: float
    failures: int | None = None

    @classmethod
    def from_row(cls, row: Mapping) -> "FitPoint":
        """From a simulate CSV row; sigma from the half-width of the 95% interval."""
        lo, hi = float(row["ci_low"]), float(row["ci_high"])
        return cls(float(row["gamma"]), float(row["p_L"]), (hi - lo) / (2 * Z95), int(row["failures"]))


@dataclass(frozen=True)
class PowerLawResult:
    nu: float
    A: float
    nu_err: float
    A_err: float
    window: tuple[float, float]
    n_points: int
    residuals: tuple[float, ...] = ()

    def predict(self, gamma) -> np.ndarray:
        return np.exp(self.A) * np.asarray(gamma, dtype=float) ** self.nu


def _select(points: Sequence[FitPoint], window, min_failures: int) -> list[FitPoint]:
    lo, hi = window
    if not lo < hi:
        raise FitError(f"empty fit window {window}")
    keep = []
    for pt in points:
        if not lo * (1 - 1e-12) <= pt.gamma <= hi * (1 + 1e-12):
            continue
        if pt.failures is not None and pt.failures < min_failures:
            continue
        if pt.p_L <= 0:
            continue
        keep.append(pt)
    return keep


def fit_power_law(
    points: Sequence[FitPoint],
    window: tuple[float, float] = DEFAULT_WINDOW,
    min_failures: int = MIN_FAILURES,
) -> PowerLawResult:
    pts = _select(points, window, min_failures)
    if len(pts) < 3:
        raise FitError(f"need at least 3 usable points in {window}, got {len(pts)}")
    x = np.log([p.gamma for p in pts])
    y = np.log([p.p_L for p in pts])
    if np.ptp(x) == 0:
        raise FitError("degenerate design: all gamma values equal")
    rel = np.array([p.sigma / p.p_L for p in pts])
    weights = 1 / rel**2 if np.all(rel > 0) else np.ones(len(pts))
    res = sm.WLS(y, sm.add_constant(x), weights=weights).fit()
    A, nu = res.params
    A_err, nu_err = (np.nan_to_num(res.bse) if len(pts) > 2 else (np.nan, np.nan))
    return PowerLawResult(float(nu), float(A), float(nu_err), float(A_err), tuple(window), len(pts),
                          tuple(float(r) for r in res.resid))


@dataclass(frozen=True)
class ScalingResult:
    alpha: float
    gamma_th: float
    c: float
    per_d: dict[int, PowerLawResult] = field(default_factory=dict)
    alpha_err: float = float("nan")

    def predict(self, gamma, d) -> np.ndarray:
        return self.c * (np.asarray(gamma, dtype=float) / self.gamma_th) ** (self.alpha * np.asarray(d))


def fit_scaling(per_d: Mapping[int, PowerLawResult]) -> ScalingResult:
    """Two chained fits: nu = alpha d through the origin, then A against nu."""
    if len(per_d) < 3:
        raise FitError(f"need at least 3 distances, got {len(per_d)}")
    ds = np.array(sorted(per_d), dtype=float)
    nu = np.array([per_d[int(d)].nu for d in ds])
    A = np.array([per_d[int(d)].A for d in ds])
    nu_err = np.array([per_d[int(d)].nu_err for d in ds])
    w = 1 / nu_err**2 if np.all(np.isfinite(nu_err) & (nu_err > 0)) else np.ones(len(ds))
    r1 = sm.WLS(nu, ds, weights=w).fit()
    alpha = float(r1.params[0])
    r2 = sm.OLS(A, sm.add_constant(nu)).fit()
    log_c, slope = r2.params
    return ScalingResult(alpha, float(np.exp(-slope)), float(np.exp(log_c)), dict(per_d), float(r1.bse[0]))


def _validate_pair(a: ScalingResult, b: ScalingResult) -> None:
    if np.isclose(a.alpha, b.alpha, rtol=0, atol=1e-12):
        raise FitError("equal alpha: the curves do not cross")


def crossover(fit: ScalingResult, other: ScalingResult, d: int | None = None) -> float:
    """Decay rate where the two scaling laws give equal p_L; d=None for the d -> infinity limit."""
    _validate_pair(fit, other)
    a, ap = fit.alpha, other.alpha
    tail = (ap * np.log(other.gamma_th) - a * np.log(fit.gamma_th)) / (ap - a)
    if d is None:
        return float(np.exp(tail))
    return float(np.exp(np.log(fit.c / other.c) / ((ap - a) * d) + tail))


# --------------------------------------------------------------------------
# estimators


class PowerLawFit(RegressorMixin, BaseEstimator):
    """p_L = exp(A) gamma^nu. X: (n, 1) gamma; y: p_L; optional sigma and failures."""

    def __init__(self, window: tuple[float, float] = DEFAULT_WINDOW, min_failures: int = MIN_FAILURES):
        self.window = window
        self.min_failures = min_failures

    def fit(self, X, y, sigma=None, failures=None):
        X = check_array(X, ensure_2d=True)
        y = np.asarray(y, dtype=float)
        sigma = np.zeros_like(y) if sigma is None else np.asarray(sigma, dtype=float)
        fails = [None] * len(y) if failures is None else [int(f) for f in failures]
        pts = [FitPoint(float(g), float(p), float(s), f) for g, p, s, f in zip(X[:, 0], y, sigma, fails)]
        self.result_ = fit_power_law(pts, tuple(self.window), self.min_failures)
        self.nu_, self.A_ = self.result_.nu, self.result_.A
        self.n_features_in_ = 1
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "result_")
        X = check_array(X)
        return self.result_.predict(X[:, 0])


class ScalingFit(RegressorMixin, BaseEstimator):
    """p_L = c (gamma/gamma_th)^(alpha d). X: (n, 2) columns (d, gamma); y: p_L."""

    def __init__(self, window: tuple[float, float] = DEFAULT_WINDOW, min_failures: int = MIN_FAILURES):
        self.window = window
        self.min_failures = min_failures

    def fit(self, X, y, sigma=None, failures=None):
        X = check_array(X)
        if X.shape[1] != 2:
            raise ValueError("X must have columns (d, gamma)")
        y = np.asarray(y, dtype=float)
        sigma = np.zeros_like(y) if sigma is None else np.asarray(sigma, dtype=float)
        fails = [None] * len(y) if failures is None else [int(f) for f in failures]
        per_d = {}
        for d in np.unique(X[:, 0]).astype(int):
            m = X[:, 0] == d
            pts = [FitPoint(g, p, s, f) for g, p, s, f, keep in zip(X[:, 1], y, sigma, fails, m) if keep]
            per_d[int(d)] = fit_power_law(pts, tuple(self.window), self.min_failures)
        self.result_ = fit_scaling(per_d)
        self.alpha_, self.gamma_th_, self.c_ = self.result_.alpha, self.result_.gamma_th, self.result_.c
        self.n_features_in_ = 2
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "result_")
        X = check_array(X)
        return self.result_.predict(X[:, 1], X[:, 0])


# --------------------------------------------------------------------------
# tables


PER_D_COLUMNS = ("protocol", "blockade", "d", "nu", "nu_err", "A", "A_err", "gamma_min", "gamma_max", "n_points")
SCALING_COLUMNS = ("protocol", "blockade", "alpha", "gamma_th", "c", "reference", "gamma_x_asymptotic")


def mean_basis_points(rows: Iterable[Mapping]) -> dict[tuple[str, str, int], list[FitPoint]]:
    """Group simulate rows by (protocol, blockade, d), pooling bases at equal gamma."""
    from statsmodels.stats.proportion import proportion_confint

    pooled: dict[tuple[str, str, int, float], list[int]] = {}
    for r in rows:
        key = (r["protocol"], r["blockade"], int(r["d"]), float(r["gamma"]))
        acc = pooled.setdefault(key, [0, 0])
        acc[0] += int(r["failures"])
        acc[1] += int(r["shots"])
    out: dict[tuple[str, str, int], list[FitPoint]] = {}
    for (p, b, d, g), (f, n) in sorted(pooled.items()):
        lo, hi = proportion_confint(f, n, alpha=0.05, method="wilson")
        out.setdefault((p, b, d), []).append(FitPoint(g, f / n, (hi - lo) / (2 * Z95), f))
    return out


def to_csv(rows: Iterable[Mapping], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: r.get(k, "") for k in columns})
    return buf.getvalue()


def per_d_row(protocol: str, blockade: str, d: int, r: PowerLawResult) -> dict:
    return {
        "protocol": protocol, "blockade": blockade, "d": d,
        "nu": repr(r.nu), "nu_err": repr(r.nu_err), "A": repr(r.A), "A_err": repr(r.A_err),
        "gamma_min": repr(r.window[0]), "gamma_max": repr(r.window[1]), "n_points": r.n_points,
    }


def format_report(title: str, fits: Mapping[tuple[str, str, int], PowerLawResult],
                  scaling: Mapping[tuple[str, str], ScalingResult] | None = None) -> str:
    lines = [f"# {title}"]
    for (p, b, d), r in sorted(fits.items()):
        lines.append(
            f"{p:10s} {b:13s} d={d:<3d} nu={r.nu:.4f}+-{r.nu_err:.4f} A={r.A:.4f}+-{r.A_err:.4f} "
            f"window=[{r.window[0]:.3g},{r.window[1]:.3g}] points={r.n_points}"
        )
    for (p, b), s in sorted((scaling or {}).items()):
        lines.append(f"{p:10s} {b:13s} alpha={s.alpha:.4f} gamma_th={s.gamma_th:.4g} c={s.c:.4g}")
    return "\n".join(lines) + "\n"

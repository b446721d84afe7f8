"""Forecast and residual diagnostics, method comparison tables and curve export.

All RMSEs are on the standardized RV scale. Residual diagnostics (Q-Q R^2,
skewness) are computed per stock on the in-sample latent HAR residuals.
"""

from __future__ import annotations

import csv
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .cotrain import Snapshot, in_sample_residuals, predict_panel
from .errors import DegenerateDataError, InputError
from .marketdata import RvPanel
from .transforms import Transform

CURVE_GRID = (-2.0, 2.0)


def rmse(pred, actual) -> float:
    pred = np.asarray(pred, dtype=float).ravel()
    actual = np.asarray(actual, dtype=float).ravel()
    if pred.shape != actual.shape:
        raise InputError(f"prediction length {pred.size} != actual length {actual.size}")
    if pred.size == 0:
        raise InputError("rmse of an empty sequence")
    return float(np.sqrt(np.mean((pred - actual) ** 2)))


def _rmse_table(per_stock) -> tuple[list[str], np.ndarray]:
    """Normalize ``method -> stock -> rmse`` (mappings or aligned sequences) to a matrix."""
    methods = list(per_stock)
    if not methods:
        raise InputError("no methods to compare")
    first = per_stock[methods[0]]
    if isinstance(first, Mapping):
        stocks = list(first)
        for m in methods:
            if set(per_stock[m]) != set(stocks):
                raise InputError(f"method {m} does not cover the same stocks")
        table = np.array([[per_stock[m][s] for s in stocks] for m in methods], dtype=float)
    else:
        table = np.array([np.asarray(per_stock[m], dtype=float) for m in methods])
        if table.ndim != 2:
            raise InputError("methods cover different numbers of stocks")
    if table.shape[1] == 0:
        raise InputError("percent_best needs at least one stock")
    return methods, table


def percent_best(per_stock) -> dict[str, float]:
    """Share of stocks (in percent) on which each method has the lowest RMSE.

    Exact ties split the stock's credit equally among the tied methods.
    """
    methods, table = _rmse_table(per_stock)
    best = table == table.min(axis=0)
    credit = best / best.sum(axis=0)
    share = 100.0 * credit.sum(axis=1) / table.shape[1]
    return dict(zip(methods, share.tolist()))


def paired_t_test_one_tailed(diffs) -> float:
    """Upper-tail p-value for H0: mean(diffs) = 0 against mean(diffs) > 0."""
    d = np.asarray(diffs, dtype=float).ravel()
    n = d.size
    if n < 2:
        raise InputError("paired t-test needs at least two differences")
    sd = d.std(ddof=1)
    if not sd > 0:
        raise DegenerateDataError("paired t-test: differences have zero variance")
    t = d.mean() / (sd / np.sqrt(n))
    return float(stats.t.sf(t, n - 1))


def qq_r2(residuals) -> float:
    """R^2 of sorted residuals regressed on normal quantiles at (i - 0.5)/n."""
    r = np.sort(np.asarray(residuals, dtype=float).ravel())
    n = r.size
    if n < 3:
        raise InputError("Q-Q R^2 needs at least three residuals")
    if np.ptp(r) == 0:
        raise DegenerateDataError("Q-Q R^2 of constant residuals")
    q = stats.norm.ppf((np.arange(1, n + 1) - 0.5) / n)
    qc = q - q.mean()
    rc = r - r.mean()
    # squared Pearson correlation equals the R^2 of the simple linear fit
    return float(min(1.0, (qc @ rc) ** 2 / ((qc @ qc) * (rc @ rc))))


def skewness(residuals) -> float:
    """Population skewness m3 / m2^1.5."""
    r = np.asarray(residuals, dtype=float).ravel()
    if r.size < 3:
        raise InputError("skewness needs at least three values")
    c = r - r.mean()
    m2 = np.mean(c ** 2)
    if not m2 > 0:
        raise DegenerateDataError("skewness of a constant sample")
    return float(np.mean(c ** 3) / m2 ** 1.5)


def improvement_correlation(per_stock, baseline: str = "identity"):
    """Pearson correlations between per-stock RMSE improvements over ``baseline``.

    Returns ``(labels, matrix)``; entries involving a zero-variance improvement
    vector are NaN (reported as missing).
    """
    methods, table = _rmse_table(per_stock)
    if baseline not in methods:
        raise InputError(f"baseline method {baseline!r} is not among {methods}")
    if table.shape[1] < 3:
        raise InputError("improvement correlation needs at least three stocks")
    base = table[methods.index(baseline)]
    labels = [m for m in methods if m != baseline]
    imp = np.array([base - table[methods.index(m)] for m in labels]).reshape(len(labels), -1)
    centered = imp - imp.mean(axis=1, keepdims=True)
    norms = np.sqrt(np.sum(centered ** 2, axis=1))
    ok = norms > 0
    out = np.full((len(labels), len(labels)), np.nan)
    if ok.any():
        u = centered[ok] / norms[ok, None]
        corr = np.clip(u @ u.T, -1.0, 1.0)
        np.fill_diagonal(corr, 1.0)
        out[np.ix_(ok, ok)] = corr
    return labels, out


def export_transform_curve(transform: Transform, grid=CURVE_GRID, points: int = 201):
    """Sample ``transform`` on ``grid`` and rescale affinely so the endpoints map to themselves."""
    lo, hi = map(float, grid)
    if not hi > lo or points < 2:
        raise InputError("curve grid needs hi > lo and at least two points")
    x = np.linspace(lo, hi, points)
    y = np.asarray(transform.forward(x), dtype=float)
    if not np.all(np.isfinite(y)):
        raise InputError(f"transform is undefined somewhere on [{lo}, {hi}]")
    span = y[-1] - y[0]
    if span == 0:
        raise DegenerateDataError("transform takes equal values at both grid ends")
    out = lo + (hi - lo) * (y - y[0]) / span
    out[0], out[-1] = lo, hi
    return x, out


@dataclass(frozen=True)
class StockScore:
    symbol: str
    rmse: float
    qq_r2: float
    skewness: float

    def __post_init__(self):
        if not np.isfinite(self.rmse) or self.rmse < 0:
            raise ValueError(f"{self.symbol}: rmse must be finite and nonnegative")
        if not self.qq_r2 <= 1.0:
            raise ValueError(f"{self.symbol}: qq_r2 exceeds 1")


@dataclass
class MethodReport:
    label: str
    scores: list[StockScore]
    mean_rmse: float
    pct_best: float
    mean_qq_r2: float
    mean_skewness: float
    p_value: float | None = None  # vs the reference method; None for the reference itself
    reference: str | None = None
    notes: list[str] = field(default_factory=list)

    @property
    def rmse_by_stock(self) -> dict[str, float]:
        return {s.symbol: s.rmse for s in self.scores}


def score_snapshot(panel: RvPanel, snapshot: Snapshot, region: str = "test") -> list[StockScore]:
    """Per-stock forecast RMSE on ``region`` plus in-sample residual diagnostics."""
    pred = predict_panel(panel, snapshot, region)
    resid = in_sample_residuals(panel, snapshot)
    scores = []
    for i, sym in enumerate(pred.symbols):
        p, a = pred.pairs(i)
        scores.append(StockScore(sym, rmse(p, a), qq_r2(resid[i]), skewness(resid[i])))
    return scores


def compare_methods(scores: Mapping[str, Sequence[StockScore]], reference: str | None = None
                    ) -> list[MethodReport]:
    """Aggregate per-stock scores into one report row per method.

    The p-value of a row tests whether ``reference`` has lower RMSE than that
    row's method (paired over stocks, one-tailed).
    """
    labels = list(scores)
    if reference is not None and reference not in scores:
        raise InputError(f"reference method {reference!r} is not among {labels}")
    per_stock = {m: {s.symbol: s.rmse for s in scores[m]} for m in labels}
    best = percent_best(per_stock)
    reports = []
    for m in labels:
        rows = list(scores[m])
        rep = MethodReport(
            m, rows,
            mean_rmse=float(np.mean([s.rmse for s in rows])),
            pct_best=best[m],
            mean_qq_r2=float(np.mean([s.qq_r2 for s in rows])),
            mean_skewness=float(np.mean([s.skewness for s in rows])),
            reference=reference,
        )
        if reference is not None and m != reference:
            ref = per_stock[reference]
            diffs = [per_stock[m][k] - ref[k] for k in per_stock[m]]
            try:
                rep.p_value = paired_t_test_one_tailed(diffs)
            except DegenerateDataError as exc:
                rep.notes.append(str(exc))
        reports.append(rep)
    return reports


def _fmt(v, spec=".4f") -> str:
    return "" if v is None or not np.isfinite(v) else format(float(v), spec)


REPORT_COLUMNS = ("method", "mean_rmse", "pct_best", "mean_qq_r2", "mean_skewness", "p_value_vs_reference")


def write_report_csv(path, reports: Sequence[MethodReport]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in reports:
            w.writerow([r.label, _fmt(r.mean_rmse), _fmt(r.pct_best), _fmt(r.mean_qq_r2),
                        _fmt(r.mean_skewness), _fmt(r.p_value, ".4e")])


def write_per_stock_csv(path, reports: Sequence[MethodReport]):
    symbols = [s.symbol for s in reports[0].scores]
    tables = [r.rmse_by_stock for r in reports]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["symbol", *[r.label for r in reports]])
        for sym in symbols:
            w.writerow([sym, *[_fmt(t[sym], ".8f") for t in tables]])


def write_correlation_csv(path, labels, matrix):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", *labels])
        for lab, row in zip(labels, matrix):
            w.writerow([lab, *[_fmt(v) for v in row]])


def write_curve_csv(path, x, y):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "f"])
        for a, b in zip(x, y):
            w.writerow([_fmt(a, ".6f"), _fmt(b, ".8f")])


def write_report_dir(out_dir, reports: Sequence[MethodReport], snapshots: Mapping[str, Snapshot] | None = None,
                     baseline: str = "identity", failures: Mapping[str, str] | None = None) -> Path:
    """Write the comparison table, the per-stock matrix, correlations and curves."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_report_csv(out / "report.csv", reports)
    write_per_stock_csv(out / "per_stock_rmse.csv", reports)
    labels = [r.label for r in reports]
    if baseline in labels and len(labels) > 1 and len(reports[0].scores) >= 3:
        lab, mat = improvement_correlation({r.label: r.rmse_by_stock for r in reports}, baseline)
        write_correlation_csv(out / "improvement_correlation.csv", lab, mat)
    for label, snap in (snapshots or {}).items():
        try:
            x, y = export_transform_curve(snap.transform)
        except (InputError, DegenerateDataError):
            continue
        write_curve_csv(out / f"curve_{label}.csv", x, y)
    if failures:
        with open(out / "failures.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["method", "error"])
            for m, msg in failures.items():
                w.writerow([m, msg])
    return out

"""Double lift plots and their mean-absolute-error KPIs.

Rows are sorted by the sort ratio ``delta = lambda_competitor / lambda_benchmark - 1``
and bucketed; per bin the observed frequency is compared with each model's
predicted frequency, weighted by the bin's share of exposure.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

PREDETERMINED = "predetermined"
QUANTILE = "quantile"


@dataclass(frozen=True)
class LiftBin:
    lower: float
    upper: float
    exposure_weight: float
    waof: float
    wapf_competitor: float
    wapf_benchmark: float
    row_count: int


@dataclass(frozen=True)
class LiftReport:
    binning: str
    bins: tuple
    mae_lift: float
    mae_lift_benchmark: float
    n_bins: int = 0


def predetermined_edges(limit: float = 0.5, step: float = 0.02) -> np.ndarray:
    """Inner edges ``-0.5, -0.48, ..., 0.5`` of right-closed bins; the outer
    bins are ``(-inf, -0.5]`` and ``(0.5, inf)``."""
    n = int(round(2 * limit / step))
    return np.round(np.linspace(-limit, limit, n + 1), 12)


def sort_ratio(competitor_pred, benchmark_pred) -> np.ndarray:
    competitor_pred = np.asarray(competitor_pred, dtype=np.float64)
    benchmark_pred = np.asarray(benchmark_pred, dtype=np.float64)
    if np.any(benchmark_pred <= 0):
        raise ValueError("benchmark predictions must be positive")
    return competitor_pred / benchmark_pred - 1.0


def _quantile_upper_edges(delta: np.ndarray, n_bins: int) -> np.ndarray:
    ordered = np.sort(delta, kind="stable")
    sizes = [len(c) for c in np.array_split(np.arange(ordered.size), n_bins)]
    ends = np.cumsum(sizes) - 1
    return ordered[ends[ends >= 0]]


def lift_report(competitor_pred, benchmark_pred, claims, exposure, binning: str = PREDETERMINED,
                n_bins: int = 20) -> LiftReport:
    """Lift-plot bins and ``mae_lift = sum_b u_b |WAPF_b - WAOF_b|`` for the
    competitor and the benchmark.

    Predictions are annualised rates. ``binning`` is ``"predetermined"``
    (step 0.02 on [-0.5, 0.5] plus two tail bins) or ``"quantile"`` with
    ``n_bins`` equal-count bins; ties at a quantile edge go to the lower bin.
    Empty bins carry zero weight and are left out.
    """
    comp = np.asarray(competitor_pred, dtype=np.float64)
    bench = np.asarray(benchmark_pred, dtype=np.float64)
    claims = np.asarray(claims, dtype=np.float64)
    v = np.asarray(exposure, dtype=np.float64)
    if not (comp.shape == bench.shape == claims.shape == v.shape):
        raise ValueError("all inputs must have the same length")
    total = v.sum()
    if total <= 0:
        raise ValueError("total exposure must be positive")
    delta = sort_ratio(comp, bench)

    if binning == PREDETERMINED:
        edges = predetermined_edges()
        idx = np.searchsorted(edges, delta, side="left")
        lowers = np.concatenate([[-np.inf], edges])
        uppers = np.concatenate([edges, [np.inf]])
    elif binning == QUANTILE:
        if n_bins < 1:
            raise ValueError("n_bins must be >= 1")
        upper = _quantile_upper_edges(delta, n_bins)
        idx = np.searchsorted(upper[:-1], delta, side="left")
        lowers = np.concatenate([[-np.inf], upper[:-1]])
        uppers = np.concatenate([upper[:-1], [np.inf]])
    else:
        raise ValueError(f"unknown binning {binning!r}")

    nb = lowers.size
    v_b = np.bincount(idx, weights=v, minlength=nb)
    n_b = np.bincount(idx, weights=claims, minlength=nb)
    c_b = np.bincount(idx, weights=comp * v, minlength=nb)
    b_b = np.bincount(idx, weights=bench * v, minlength=nb)
    rows = np.bincount(idx, minlength=nb)

    bins = []
    mae_c = mae_b = 0.0
    for b in range(nb):
        if rows[b] == 0:
            continue
        u = v_b[b] / total
        waof_b, wc, wb = n_b[b] / v_b[b], c_b[b] / v_b[b], b_b[b] / v_b[b]
        mae_c += u * abs(wc - waof_b)
        mae_b += u * abs(wb - waof_b)
        bins.append(LiftBin(float(lowers[b]), float(uppers[b]), float(u), float(waof_b), float(wc), float(wb), int(rows[b])))
    return LiftReport(binning, tuple(bins), float(mae_c), float(mae_b), int(nb))


def lift_kpis(competitor_pred, benchmark_pred, claims, exposure, n_bins: int = 20) -> dict[str, float]:
    """``mae_lift_pb``, ``mae_lift_pb_benchmark``, ``mae_lift_qbb`` and
    ``mae_lift_qbb_benchmark``."""
    pb = lift_report(competitor_pred, benchmark_pred, claims, exposure, PREDETERMINED)
    qbb = lift_report(competitor_pred, benchmark_pred, claims, exposure, QUANTILE, n_bins)
    return {
        "mae_lift_pb": pb.mae_lift,
        "mae_lift_pb_benchmark": pb.mae_lift_benchmark,
        "mae_lift_qbb": qbb.mae_lift,
        "mae_lift_qbb_benchmark": qbb.mae_lift_benchmark,
    }


LIFT_CSV_HEADER = ["lower", "upper", "exposure_weight", "row_count", "waof", "wapf_competitor", "wapf_benchmark"]


def write_lift_csv(report: LiftReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LIFT_CSV_HEADER)
        for b in report.bins:
            w.writerow([repr(b.lower), repr(b.upper), repr(b.exposure_weight), b.row_count,
                        repr(b.waof), repr(b.wapf_competitor), repr(b.wapf_benchmark)])


def write_kpis(kpis: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(kpis, fh, indent=2, sort_keys=True)
        fh.write("\n")

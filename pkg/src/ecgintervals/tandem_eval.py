"""Metrics, ROC/PR analysis, threshold selection, tandem PR inference,
and report/plot emission.

The headline regression metrics are MAE, the standard deviation of the
prediction-minus-label differences (population form, the Bland-Altman
spread), and Pearson's correlation. Classification quality is summarized
by ROC AUC (trapezoid over distinct-score cut points, which equals the
Mann-Whitney pairwise concordance with ties counted half) and the area
under the precision-recall curve (stepwise interpolation).

The presence threshold maximizes sensitivity + specificity (Youden's J)
over all distinct score cut points, breaking ties toward higher
specificity. Tandem PR inference emits the regressor's estimate only
when the classifier's probability reaches the stored threshold;
suppressed records carry no PR value and are excluded from PR metrics.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import ikres_model as im
from . import training as tr


class EvalError(Exception):
    """Metric precondition failures."""


class DegenerateInputError(EvalError):
    """Zero-variance input where variance is required."""


class SingleClassError(EvalError):
    """Both classes are required."""


# ---------------------------------------------------------------------------
# scalar regression metrics
# ---------------------------------------------------------------------------

def _paired(preds, labels) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(preds, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape or p.ndim != 1:
        raise EvalError(f"expected equal 1-d arrays, got {p.shape} and {y.shape}")
    if p.size == 0:
        raise EvalError("empty input")
    return p, y


def mae(preds, labels) -> float:
    p, y = _paired(preds, labels)
    return float(np.mean(np.abs(p - y)))


def sderr(preds, labels) -> float:
    """Population standard deviation of the differences."""
    p, y = _paired(preds, labels)
    return float(np.std(p - y))


def pearson_r(preds, labels) -> float:
    p, y = _paired(preds, labels)
    sp, sy = np.std(p), np.std(y)
    if sp == 0 or sy == 0:
        raise DegenerateInputError("pearson_r undefined for constant input")
    return float(np.mean((p - p.mean()) * (y - y.mean())) / (sp * sy))


# ---------------------------------------------------------------------------
# ROC / PR curves
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray  # leading +inf sentinel for the (0, 0) point


@dataclass(frozen=True)
class PrCurve:
    recall: np.ndarray
    precision: np.ndarray
    thresholds: np.ndarray


def _check_binary(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1 or s.size == 0:
        raise EvalError("scores and labels must be equal nonempty 1-d arrays")
    if not np.all((y == 0) | (y == 1)):
        raise EvalError("labels must be binary")
    if np.all(y == 1) or np.all(y == 0):
        raise SingleClassError("both classes required")
    return s, y.astype(int)


def _sweep(scores: np.ndarray, labels: np.ndarray):
    """Cumulative TP/FP at each distinct score, descending."""
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    tp = np.cumsum(y)
    fp = np.cumsum(1 - y)
    distinct = np.flatnonzero(np.diff(s) != 0)
    last = np.concatenate([distinct, [s.size - 1]])
    return s[last], tp[last], fp[last], int(tp[-1]), int(fp[-1])


def roc_auc(scores, labels) -> tuple[RocCurve, float]:
    """(curve, AUC); the trapezoid area equals Mann-Whitney concordance."""
    s, y = _check_binary(scores, labels)
    thr, tp, fp, n_pos, n_neg = _sweep(s, y)
    tpr = np.concatenate([[0.0], tp / n_pos])
    fpr = np.concatenate([[0.0], fp / n_neg])
    thresholds = np.concatenate([[np.inf], thr])
    auc = float(np.trapezoid(tpr, fpr))
    return RocCurve(fpr=fpr, tpr=tpr, thresholds=thresholds), auc


def pr_auc(scores, labels) -> tuple[PrCurve, float]:
    """(curve, AUPRC) by stepwise interpolation (average precision)."""
    s, y = _check_binary(scores, labels)
    thr, tp, fp, n_pos, _ = _sweep(s, y)
    recall = tp / n_pos
    precision = tp / np.maximum(tp + fp, 1)
    auprc = float(np.sum(np.diff(np.concatenate([[0.0], recall])) * precision))
    return PrCurve(recall=recall, precision=precision, thresholds=thr), auprc


@dataclass(frozen=True)
class SelectedThreshold:
    threshold: float
    sensitivity: float
    specificity: float
    youden_j: float


def select_threshold(val_scores, val_labels) -> SelectedThreshold:
    """Cut point (predict positive at score >= threshold) maximizing
    sensitivity + specificity; ties break toward higher specificity."""
    s, y = _check_binary(val_scores, val_labels)
    if np.all(s == s[0]):
        raise DegenerateInputError("degenerate scores: all values identical")
    thr, tp, fp, n_pos, n_neg = _sweep(s, y)
    sens = tp / n_pos
    spec = 1.0 - fp / n_neg
    j = sens + spec
    best = np.flatnonzero(j == j.max())
    # ties: prefer higher specificity, then the larger threshold
    best = best[np.lexsort((-thr[best], -spec[best]))][0]
    return SelectedThreshold(
        threshold=float(thr[best]),
        sensitivity=float(sens[best]),
        specificity=float(spec[best]),
        youden_j=float(j[best] - 1.0),
    )


# ---------------------------------------------------------------------------
# tandem PR inference
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TandemResult:
    record_id: str
    probability: float
    emitted: bool
    pr_ms: Optional[float]
    reason: Optional[str] = None


def tandem_pr_inference(
    x: np.ndarray,
    record_ids: Sequence[str],
    prchk_ckpt: im.ModelCheckpoint,
    pr_ckpt: im.ModelCheckpoint,
    batch_size: int = 256,
) -> list[TandemResult]:
    """Gate the PR regressor with the presence classifier per record.

    ``x`` is the preprocessed batch [n, 1, input_len]. A record is
    emitted when the classifier probability is at or above the stored
    threshold; suppressed records carry the reason instead of a value.
    """
    if prchk_ckpt.task != "prchk" or pr_ckpt.task != "pr":
        raise EvalError("tandem requires a prchk checkpoint and a pr checkpoint")
    if prchk_ckpt.config.input_len != pr_ckpt.config.input_len:
        raise EvalError("checkpoint mismatch: different input lengths")
    if prchk_ckpt.prchk_threshold is None:
        raise EvalError("prchk checkpoint carries no threshold")
    if x.ndim != 3 or x.shape[2] != prchk_ckpt.config.input_len:
        raise EvalError(f"input shape {x.shape} incompatible with checkpoints")
    if pr_ckpt.normalizer is None:
        raise EvalError("pr checkpoint carries no normalizer")

    probs = tr.predict(prchk_ckpt.params, prchk_ckpt.config, "prchk", x, batch_size)[:, 0]
    z = tr.predict(pr_ckpt.params, pr_ckpt.config, "pr", x, batch_size)
    pr_values = pr_ckpt.normalizer.inverse(z)[:, 0]
    threshold = prchk_ckpt.prchk_threshold

    results = []
    for rid, prob, pr_val in zip(record_ids, probs, pr_values):
        if prob >= threshold:
            results.append(TandemResult(rid, float(prob), True, float(pr_val)))
        else:
            results.append(
                TandemResult(rid, float(prob), False, None, reason="suppressed (no P-wave)")
            )
    return results


# ---------------------------------------------------------------------------
# kernel density estimation
# ---------------------------------------------------------------------------

@dataclass
class KdeGrid:
    x: np.ndarray  # label-axis centers
    y: np.ndarray  # prediction-axis centers
    density: np.ndarray  # [len(y), len(x)]

    def integral(self) -> float:
        dx = self.x[1] - self.x[0]
        dy = self.y[1] - self.y[0]
        return float(self.density.sum() * dx * dy)


def silverman_bandwidth(values: np.ndarray) -> float:
    """0.9 * min(std, IQR/1.34) * n^(-1/5), with a floor for tight data."""
    v = np.asarray(values, dtype=np.float64)
    std = np.std(v)
    q75, q25 = np.percentile(v, [75, 25])
    spread = min(std, (q75 - q25) / 1.34) if q75 > q25 else std
    if spread <= 0:
        spread = max(np.abs(v).max(), 1.0) * 1e-3
    return 0.9 * spread * v.size ** (-0.2)


def kde_grid(
    preds, labels, grid_size: int = 128, bandwidth: Optional[tuple[float, float]] = None
) -> KdeGrid:
    """Product-Gaussian KDE of (label, prediction) pairs on a uniform grid.

    The grid pads the data range by five bandwidths per side so the
    density integrates to one over the grid to within tolerance.
    """
    p, y = _paired(preds, labels)
    if p.size < 10:
        raise EvalError(f"kde requires >= 10 points, got {p.size}")
    hx = bandwidth[0] if bandwidth else silverman_bandwidth(y)
    hy = bandwidth[1] if bandwidth else silverman_bandwidth(p)
    gx = np.linspace(y.min() - 5 * hx, y.max() + 5 * hx, grid_size)
    gy = np.linspace(p.min() - 5 * hy, p.max() + 5 * hy, grid_size)
    kx = np.exp(-0.5 * ((gx[None, :] - y[:, None]) / hx) ** 2) / (hx * np.sqrt(2 * np.pi))
    ky = np.exp(-0.5 * ((gy[None, :] - p[:, None]) / hy) ** 2) / (hy * np.sqrt(2 * np.pi))
    density = (ky.T @ kx) / p.size
    return KdeGrid(x=gx, y=gy, density=density)


def kde_plot(
    preds,
    labels,
    svg_path,
    csv_path=None,
    grid_size: int = 128,
    bandwidth: Optional[tuple[float, float]] = None,
    title: str = "",
) -> KdeGrid:
    """Render the density with the ideal-estimator identity line overlaid.

    SVG output is deterministic (no embedded timestamps); the raw grid
    goes to ``csv_path`` for programmatic checks.
    """
    grid = kde_grid(preds, labels, grid_size=grid_size, bandwidth=bandwidth)
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "ecgintervals"}):
        fig, ax = plt.subplots(figsize=(5, 4.5))
        ax.contourf(grid.x, grid.y, grid.density, levels=24, cmap="Blues")
        lo = max(grid.x[0], grid.y[0])
        hi = min(grid.x[-1], grid.y[-1])
        ax.plot([lo, hi], [lo, hi], linestyle=":", color="orange", linewidth=1.8)
        ax.set_xlabel("label")
        ax.set_ylabel("prediction")
        if title:
            ax.set_title(title)
        fig.tight_layout()
        fig.savefig(svg_path, format="svg", metadata={"Date": None})
        plt.close(fig)

    if csv_path is not None:
        header = "," + ",".join(f"{v:.9g}" for v in grid.x)
        rows = [header]
        for yi, row in zip(grid.y, grid.density):
            rows.append(f"{yi:.9g}," + ",".join(f"{v:.9g}" for v in row))
        with open(csv_path, "w", encoding="utf-8") as f:
            f.write("\n".join(rows) + "\n")
    return grid


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    """Per-target regression rows plus optional classification block."""

    dataset_id: str
    config_hash: Optional[str]
    regression: dict[str, dict[str, dict[str, float]]] = field(default_factory=dict)
    classification: Optional[dict[str, float]] = None
    checkpoint_ids: dict[str, str] = field(default_factory=dict)

    def add_regression(self, target: str, method: str, preds, labels) -> None:
        p, y = _paired(preds, labels)
        row = {
            "mae": mae(p, y),
            "sderr": sderr(p, y),
            "n": int(p.size),
        }
        try:
            row["pearson_r"] = pearson_r(p, y)
        except DegenerateInputError:
            row["pearson_r"] = None
        self.regression.setdefault(target, {})[method] = row

    def set_classification(self, scores, labels, threshold: float) -> None:
        s, y = _check_binary(scores, labels)
        _, auc = roc_auc(s, y)
        _, auprc = pr_auc(s, y)
        pred = s >= threshold
        tp = int(np.sum(pred & (y == 1)))
        tn = int(np.sum(~pred & (y == 0)))
        n_pos = int(np.sum(y == 1))
        n_neg = int(np.sum(y == 0))
        self.classification = {
            "auc": auc,
            "auprc": auprc,
            "accuracy": (tp + tn) / y.size,
            "sensitivity": tp / n_pos,
            "specificity": tn / n_neg,
            "threshold": float(threshold),
            "n_pos": n_pos,
            "n_neg": n_neg,
        }

    def to_dict(self) -> dict:
        return {
            "dataset_id": self.dataset_id,
            "config_hash": self.config_hash,
            "checkpoint_ids": dict(sorted(self.checkpoint_ids.items())),
            "regression": self.regression,
            "classification": self.classification,
        }


_METRIC_ROWS = (("MAE", "mae"), ("SDerr", "sderr"), ("Pearson-R", "pearson_r"))


def render_table(report: MetricsReport) -> str:
    """Text table: one block per target, metric rows by method columns."""
    lines = [f"dataset: {report.dataset_id}"]
    if report.config_hash:
        lines.append(f"config:  {report.config_hash}")
    for target in sorted(report.regression):
        methods = sorted(report.regression[target])
        lines.append("")
        lines.append(f"== {target} ==")
        header = f"{'metric':<12}" + "".join(f"{m:>18}" for m in methods)
        lines.append(header)
        for label, key in _METRIC_ROWS:
            cells = []
            for m in methods:
                v = report.regression[target][m].get(key)
                cells.append(f"{v:>18.4f}" if v is not None else f"{'n/a':>18}")
            lines.append(f"{label:<12}" + "".join(cells))
        ns = "".join(f"{report.regression[target][m]['n']:>18d}" for m in methods)
        lines.append(f"{'n':<12}" + ns)
    if report.classification is not None:
        lines.append("")
        lines.append("== P-wave presence classification ==")
        for k in ("auc", "auprc", "accuracy", "sensitivity", "specificity",
                  "threshold", "n_pos", "n_neg"):
            lines.append(f"{k:<12} {report.classification[k]:.6g}")
    return "\n".join(lines) + "\n"


def emit_report(report: MetricsReport, path, fmt: str = "json") -> bytes:
    """Serialize deterministically; identical inputs yield identical bytes."""
    if fmt == "json":
        payload = json.dumps(report.to_dict(), indent=2, sort_keys=True).encode("utf-8")
    elif fmt == "table":
        payload = render_table(report).encode("utf-8")
    else:
        raise EvalError(f"unknown report format {fmt!r}")
    with open(path, "wb") as f:
        f.write(payload)
    return payload

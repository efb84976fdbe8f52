"""ROC construction, trapezoid AUC with a pair-counting oracle, Youden
threshold selection, and cross-run mean with Student-t confidence interval.

Ties are grouped: the ROC has one point per distinct score, which makes the
trapezoid integral equal the Mann-Whitney pair count exactly (checked to
1e-12 in the tests).
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field

import numpy as np

from .husl import read_hu
from .net import ops
from .net.checkpoint import load_checkpoint
from .net.model import forward
from .phantom import LABEL_COPD, DatasetManifest
from .windowing import FULL_RANGE, WindowSetting, apply_window
from .wso import clamp_affine

ROC_HEADER = ["fpr", "tpr", "threshold"]
SUMMARY_HEADER = [
    "arm", "split", "n_runs", "mean_auc", "ci_lo", "ci_hi",
    "learned_ww_mean", "learned_wl_mean",
]

# two-sided 95% Student-t quantiles, t_{df, 0.975}, df = 1..30
T_TABLE_975 = [
    12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365, 2.306, 2.262, 2.228,
    2.201, 2.179, 2.160, 2.145, 2.131, 2.120, 2.110, 2.101, 2.093, 2.086,
    2.080, 2.074, 2.069, 2.064, 2.060, 2.056, 2.052, 2.048, 2.045, 2.042,
]


class SingleClassError(ValueError):
    """ROC/AUC need both classes present."""


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray  # strictly decreasing; +inf / -inf endpoints

    def __post_init__(self):
        self.fpr = np.asarray(self.fpr, dtype=np.float64)
        self.tpr = np.asarray(self.tpr, dtype=np.float64)
        self.thresholds = np.asarray(self.thresholds, dtype=np.float64)
        if not (len(self.fpr) == len(self.tpr) == len(self.thresholds)):
            raise ValueError("fpr/tpr/thresholds length mismatch")
        if np.any(np.diff(self.thresholds) >= 0):
            raise ValueError("thresholds must be strictly decreasing")
        if np.any(np.diff(self.fpr) < 0) or np.any(np.diff(self.tpr) < 0):
            raise ValueError("fpr and tpr must be non-decreasing")
        for arr in (self.fpr, self.tpr):
            if arr[0] != 0.0 or arr[-1] != 1.0 or arr.min() < 0 or arr.max() > 1:
                raise ValueError("curve must run from (0,0) to (1,1) within [0,1]")

    def write_csv(self, path) -> None:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(ROC_HEADER)
        for f, t, th in zip(self.fpr, self.tpr, self.thresholds):
            writer.writerow([f"{f:.10g}", f"{t:.10g}", f"{th:.10g}"])
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(buf.getvalue())

    @classmethod
    def read_csv(cls, path) -> "RocCurve":
        with open(path, "r", encoding="utf-8", newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0] != ROC_HEADER:
            raise ValueError(f"{path}: expected ROC header {ROC_HEADER}")
        data = np.array([[float(v) for v in row] for row in rows[1:]])
        return cls(fpr=data[:, 0], tpr=data[:, 1], thresholds=data[:, 2])


def _check_two_classes(labels: np.ndarray) -> None:
    if not ((labels == 1).any() and (labels == 0).any()):
        raise SingleClassError("need at least one positive and one negative label")


def roc_curve(scores, labels) -> RocCurve:
    """Tie-grouped ROC: one point per distinct score, endpoints appended."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    _check_two_classes(labels)
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order].astype(np.float64)
    # group ties: cumulative counts at the last index of each distinct score
    distinct = np.nonzero(np.diff(s))[0]
    last = np.append(distinct, len(s) - 1)
    tp = np.cumsum(y)[last]
    fp = np.cumsum(1.0 - y)[last]
    n_pos = tp[-1]
    n_neg = fp[-1]
    fpr = np.concatenate([[0.0], fp / n_neg, [1.0]])
    tpr = np.concatenate([[0.0], tp / n_pos, [1.0]])
    thresholds = np.concatenate([[np.inf], s[last], [-np.inf]])
    return RocCurve(fpr=fpr, tpr=tpr, thresholds=thresholds)


def auc(curve: RocCurve) -> float:
    """Trapezoid area over fpr."""
    return float(np.sum(np.diff(curve.fpr) * (curve.tpr[1:] + curve.tpr[:-1]) / 2.0))


def auc_pair_oracle(scores, labels) -> float:
    """Mann-Whitney pair count: P(s_pos > s_neg) + 0.5 P(s_pos = s_neg)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    _check_two_classes(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    greater = (pos[:, None] > neg[None, :]).sum(dtype=np.float64)
    equal = (pos[:, None] == neg[None, :]).sum(dtype=np.float64)
    return float((greater + 0.5 * equal) / (len(pos) * len(neg)))


def youden_threshold(curve: RocCurve) -> float:
    """Threshold maximizing tpr - fpr over the curve's real thresholds;
    ties break toward the higher threshold."""
    finite = np.isfinite(curve.thresholds)
    j = curve.tpr[finite] - curve.fpr[finite]
    ths = curve.thresholds[finite]
    best = j.max()
    return float(ths[np.nonzero(j == best)[0][0]])  # descending: first = highest


def mean_ci(values, level: float = 0.95):
    """Student-t interval over per-run values; returns (mean, lo, hi)."""
    values = np.asarray(values, dtype=np.float64)
    n = len(values)
    if n < 2:
        raise ValueError(f"confidence interval needs n >= 2, got {n}")
    mean = float(values.mean())
    s = float(values.std(ddof=1))
    df = n - 1
    if level == 0.95 and df <= len(T_TABLE_975):
        t = T_TABLE_975[df - 1]
    else:
        from scipy import stats

        t = float(stats.t.ppf(0.5 + level / 2.0, df))
    half = t * s / np.sqrt(n)
    return mean, mean - half, mean + half


@dataclass
class AucSummary:
    arm: str
    split: str
    per_run_auc: list
    mean: float
    ci_lo: float | None
    ci_hi: float | None
    n_runs: int
    learned_ww_mean: float | None = None
    learned_wl_mean: float | None = None
    per_run_threshold: list = field(default_factory=list)

    def csv_row(self) -> list:
        def fmt(v):
            return "" if v is None else f"{v:.6f}"

        return [
            self.arm, self.split, str(self.n_runs), f"{self.mean:.6f}",
            fmt(self.ci_lo), fmt(self.ci_hi),
            fmt(self.learned_ww_mean), fmt(self.learned_wl_mean),
        ]


class EvaluationError(RuntimeError):
    pass


def infer_scores(checkpoint_path, manifest: DatasetManifest, split: str, batch_size: int = 64):
    """Run one checkpoint over a split; returns (scores, labels (0/1))."""
    params, net_cfg, meta = load_checkpoint(checkpoint_path)
    entries = manifest.for_split(split)
    if not entries:
        raise EvaluationError(f"split {split!r} is empty or missing")
    window = WindowSetting(meta["window_width"], meta["window_level"])
    use_wso = "wso/w" in params
    preprocess = FULL_RANGE if use_wso else window
    images = np.stack(
        [apply_window(read_hu(manifest.abspath(e)), preprocess) for e in entries]
    )[:, None, :, :].astype(np.float32)
    if images.shape[2] != net_cfg.input_size:
        raise EvaluationError(
            f"checkpoint expects {net_cfg.input_size}px input, split has {images.shape[2]}px"
        )
    labels = np.array([1 if e.label == LABEL_COPD else 0 for e in entries])
    scores = np.empty(len(labels), dtype=np.float64)
    for lo in range(0, len(labels), batch_size):
        xb = images[lo : lo + batch_size]
        if use_wso:
            xb = clamp_affine(xb, float(params["wso/w"][0]), float(params["wso/b"][0]), 1.0)
        logits, _ = forward(params, net_cfg, xb)
        scores[lo : lo + batch_size] = ops.sigmoid(logits.astype(np.float64))
    return scores, labels


def _read_learned_window(run_dir):
    path = os.path.join(run_dir, "learned_window.txt")
    if not os.path.exists(path):
        return None
    with open(path, "r", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return float(rows[1][0]), float(rows[1][1])


def evaluate_runs(arm: str, run_dirs, manifest: DatasetManifest, split: str, eval_dir) -> AucSummary:
    """Infer every run on `split`, write per-run ROC CSVs plus a one-row
    summary CSV under eval_dir, and return the summary."""
    if not run_dirs:
        raise EvaluationError(f"no runs to evaluate for arm {arm!r}")
    os.makedirs(eval_dir, exist_ok=True)
    aucs, thresholds, learned = [], [], []
    for rd in run_dirs:
        seed = os.path.basename(rd.rstrip("/"))
        scores, labels = infer_scores(os.path.join(rd, "checkpoint.bin"), manifest, split)
        curve = roc_curve(scores, labels)
        curve.write_csv(os.path.join(eval_dir, f"roc_seed{seed}.csv"))
        aucs.append(auc(curve))
        thresholds.append(youden_threshold(curve))
        lw = _read_learned_window(rd)
        if lw is not None:
            learned.append(lw)
    if len(aucs) >= 2:
        mean, lo, hi = mean_ci(aucs)
    else:
        mean, lo, hi = float(aucs[0]), None, None
    summary = AucSummary(
        arm=arm,
        split=split,
        per_run_auc=aucs,
        mean=mean,
        ci_lo=lo,
        ci_hi=hi,
        n_runs=len(aucs),
        learned_ww_mean=float(np.mean([w for w, _ in learned])) if learned else None,
        learned_wl_mean=float(np.mean([l for _, l in learned])) if learned else None,
        per_run_threshold=thresholds,
    )
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SUMMARY_HEADER)
    writer.writerow(summary.csv_row())
    with open(os.path.join(eval_dir, "summary.csv"), "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())
    return summary

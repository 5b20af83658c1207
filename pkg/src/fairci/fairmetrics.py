"""Evaluation statistics: balanced accuracy, squared distance correlation,
equalized-odds gap, per-group accuracy and McNemar's test."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
from scipy import stats

from .errors import InvalidParameterError, UndefinedMetricError

DCOR_MAX_POINTS = 2000
REPORT_FORMAT_VERSION = 1


def _binary(a, name) -> np.ndarray:
    a = np.asarray(a).ravel()
    if not np.isin(a, (0, 1)).all():
        raise InvalidParameterError(f"{name} must be binary")
    return a.astype(np.int64)


def balanced_accuracy(preds, labels) -> float:
    """Mean of the per-class recalls."""
    preds = _binary(preds, "preds")
    labels = _binary(labels, "labels")
    if preds.shape != labels.shape:
        raise InvalidParameterError("preds and labels differ in length")
    recalls = []
    for k in (0, 1):
        mask = labels == k
        if not mask.any():
            raise UndefinedMetricError(f"class {k} absent from labels")
        recalls.append(np.mean(preds[mask] == k))
    return float(np.mean(recalls))


def _as_matrix(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    return x.reshape(len(x), -1)


def _centered_distances(x: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - x[None, :, :]
    d = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    return d - d.mean(axis=0, keepdims=True) - d.mean(axis=1, keepdims=True) + d.mean()


def dcor2(x, y) -> float:
    """Squared distance correlation (biased V-statistic).

    Rows of ``x`` and ``y`` are paired observations; 1-d inputs are treated
    as scalar samples. Returns 0 when either distance variance vanishes.
    """
    x = _as_matrix(x)
    y = _as_matrix(y)
    if len(x) != len(y):
        raise InvalidParameterError("x and y must have the same number of rows")
    if len(x) < 2:
        raise InvalidParameterError("dcor2 needs at least two observations")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise InvalidParameterError("dcor2 inputs must be finite")
    a = _centered_distances(x)
    b = _centered_distances(y)
    dvar_x = np.mean(a * a)
    dvar_y = np.mean(b * b)
    if dvar_x <= 0.0 or dvar_y <= 0.0:
        return 0.0
    dcov = np.mean(a * b)
    return float(np.clip(dcov / np.sqrt(dvar_x * dvar_y), 0.0, 1.0))


def subsample(n: int, max_points: int, seed: int) -> np.ndarray:
    if n <= max_points:
        return np.arange(n)
    return np.sort(np.random.default_rng(seed).choice(n, size=max_points, replace=False))


def conditional_dcor2(x, s, labels, max_points: int = DCOR_MAX_POINTS, seed: int = 0) -> float:
    """Label-conditional squared distance correlation.

    ``dcor2(x, s)`` is computed separately within each label class and
    averaged with weights proportional to class size. This is zero exactly
    when the dependence left between ``x`` and ``s`` is none beyond what the
    label explains.
    """
    x = _as_matrix(x)
    s = _as_matrix(s)
    labels = np.asarray(labels).ravel()
    idx = subsample(len(labels), max_points, seed)
    x, s, labels = x[idx], s[idx], labels[idx]
    total = 0.0
    for k in np.unique(labels):
        m = labels == k
        if m.sum() >= 2:
            total += m.sum() * dcor2(x[m], s[m])
    return float(total / len(labels))


def marginal_dcor2(x, s, max_points: int = DCOR_MAX_POINTS, seed: int = 0) -> float:
    x = _as_matrix(x)
    s = _as_matrix(s)
    idx = subsample(len(x), max_points, seed)
    return dcor2(x[idx], s[idx])


def _cell_rates(preds, labels, groups):
    preds = np.asarray(preds).ravel()
    labels = np.asarray(labels).ravel()
    groups = np.asarray(groups).ravel()
    if not (len(preds) == len(labels) == len(groups)):
        raise InvalidParameterError("preds, labels and groups differ in length")
    rates = {}
    for y in np.unique(labels):
        row = {}
        for g in np.unique(groups):
            m = (labels == y) & (groups == g)
            if m.any():
                row[g] = float(np.mean(preds[m] == y))
        rates[y] = row
    return rates


def eo_gap(preds, labels, groups) -> float:
    """Equalized-odds gap.

    For each label class the spread (max - min) of the per-group rates of
    correct classification is taken; the result is the mean over classes.
    Empty (label, group) cells are skipped.
    """
    if len(np.unique(np.asarray(groups))) < 2:
        raise InvalidParameterError("eo_gap needs at least two groups")
    rates = _cell_rates(preds, labels, groups)
    spreads = [max(r.values()) - min(r.values()) for r in rates.values() if r]
    return float(np.mean(spreads))


def per_group_accuracy(preds, labels, groups, group_values=None) -> dict:
    """Accuracy within each group. Groups listed in ``group_values`` without
    members map to ``None``."""
    preds = np.asarray(preds).ravel()
    labels = np.asarray(labels).ravel()
    groups = np.asarray(groups).ravel()
    keys = list(np.unique(groups)) if group_values is None else list(group_values)
    out = {}
    for g in keys:
        m = groups == g
        out[_plain(g)] = float(np.mean(preds[m] == labels[m])) if m.any() else None
    return out


def _plain(v):
    return v.item() if isinstance(v, np.generic) else v


class McNemarResult(NamedTuple):
    chi2: float
    p: float
    degenerate: bool = False


def mcnemar_from_chi2(chi2: float) -> float:
    return float(stats.chi2.sf(chi2, df=1))


def mcnemar(correct_a, correct_b) -> McNemarResult:
    """Uncorrected McNemar test on paired correctness indicators."""
    a = _binary(correct_a, "correct_a").astype(bool)
    b = _binary(correct_b, "correct_b").astype(bool)
    if a.shape != b.shape:
        raise InvalidParameterError("paired sequences differ in length")
    n01 = int(np.sum(a & ~b))
    n10 = int(np.sum(~a & b))
    if n01 + n10 == 0:
        return McNemarResult(0.0, 1.0, True)
    chi2 = (n01 - n10) ** 2 / (n01 + n10)
    return McNemarResult(float(chi2), mcnemar_from_chi2(chi2))


def binarize(s, threshold: float) -> np.ndarray:
    return (np.asarray(s) > threshold).astype(np.int64)


@dataclass
class MetricsReport:
    bacc: float
    dcor2_latent: float
    dcor2_output: float
    eo_gap: float
    per_group_acc: dict
    n_eval: int
    dcor2_latent_marginal: float = float("nan")
    dcor2_output_marginal: float = float("nan")
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n_eval <= 0:
            raise InvalidParameterError("n_eval must be positive")
        for name in ("bacc", "dcor2_latent", "dcor2_output", "eo_gap"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InvalidParameterError(f"{name}={v} outside [0, 1]")

    def flat(self) -> dict:
        row = {
            "bacc": self.bacc,
            "dcor2_latent": self.dcor2_latent,
            "dcor2_output": self.dcor2_output,
            "eo_gap": self.eo_gap,
            "dcor2_latent_marginal": self.dcor2_latent_marginal,
            "dcor2_output_marginal": self.dcor2_output_marginal,
            "n_eval": self.n_eval,
        }
        for g, acc in sorted(self.per_group_acc.items(), key=lambda kv: str(kv[0])):
            row[f"acc_group_{g}"] = acc
        row.update(self.extra)
        return row


def evaluate_outputs(
    latent,
    logits,
    labels,
    sensitive,
    threshold: float,
    max_points: int = DCOR_MAX_POINTS,
    seed: int = 0,
) -> MetricsReport:
    """Build a report from held-out encoder outputs and the continuous
    sensitive attribute. Groups for EO and per-group accuracy come from
    thresholding ``sensitive``."""
    latent = np.asarray(latent, dtype=np.float64)
    logits = np.asarray(logits, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(np.int64)
    sensitive = np.asarray(sensitive, dtype=np.float64).ravel()
    preds = (logits > 0).astype(np.int64)
    groups = binarize(sensitive, threshold)
    probs = 1.0 / (1.0 + np.exp(-logits))
    return MetricsReport(
        bacc=balanced_accuracy(preds, labels),
        dcor2_latent=conditional_dcor2(latent, sensitive, labels, max_points, seed),
        dcor2_output=conditional_dcor2(probs, sensitive, labels, max_points, seed),
        eo_gap=eo_gap(preds, labels, groups),
        per_group_acc=per_group_accuracy(preds, labels, groups, group_values=(0, 1)),
        n_eval=len(labels),
        dcor2_latent_marginal=marginal_dcor2(latent, sensitive, max_points, seed),
        dcor2_output_marginal=marginal_dcor2(probs, sensitive, max_points, seed),
    )


def _fmt(v) -> str:
    if v is None:
        return ""
    v = _plain(v)
    if isinstance(v, float):
        return repr(round(v, 10))
    return str(v)


def write_csv(rows: list[dict], path=None, fieldnames=None) -> str:
    """Write rows as CSV preceded by a ``# format_version`` comment line.
    Returns the text; writes it to ``path`` when given."""
    if fieldnames is None:
        fieldnames = []
        for r in rows:
            for k in r:
                if k not in fieldnames:
                    fieldnames.append(k)
    buf = io.StringIO()
    buf.write(f"# format_version: {REPORT_FORMAT_VERSION}\n")
    w = csv.DictWriter(buf, fieldnames=fieldnames, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r.get(k)) for k in fieldnames})
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def text_report(row: dict) -> str:
    width = max(len(k) for k in row)
    return "\n".join(f"{k.ljust(width)} : {_fmt(v)}" for k, v in row.items()) + "\n"

"""Agreement metrics and cross-site evaluation.

Cohen's weighted kappa over the 4-class ordinal label space, patient-level
prediction by averaging per-image softmax vectors, the K x K cross-site
generalization matrix, summary statistics, and report emission.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import nn
from .errors import DegenerateMarginals, InvalidLabel, InvalidShape, IoError

NUM_CLASSES = 4


def confusion_matrix(y_true, y_pred, num_classes: int = NUM_CLASSES) -> np.ndarray:
    """Counts[i][j] = occurrences of true class i predicted as class j."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape or y_true.ndim != 1 or y_true.size == 0:
        raise InvalidShape("label sequences must be equal-length, nonempty, 1-D")
    for arr, name in ((y_true, "y_true"), (y_pred, "y_pred")):
        if arr.min() < 0 or arr.max() >= num_classes:
            raise InvalidLabel(f"{name} contains labels outside [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (y_true, y_pred), 1)
    return counts


def _agreement_weights(num_classes: int, kind: str) -> np.ndarray:
    idx = np.arange(num_classes, dtype=np.float64)
    dist = np.abs(idx[:, None] - idx[None, :]) / (num_classes - 1)
    if kind == "linear":
        return 1.0 - dist
    if kind == "quadratic":
        return 1.0 - dist ** 2
    if kind == "simple":
        return (dist == 0).astype(np.float64)
    raise InvalidShape(f"unknown weighting {kind!r}")


def weighted_kappa(y_true, y_pred, num_classes: int = NUM_CLASSES,
                   weighting: str = "linear") -> float:
    """Chance-corrected agreement with ordinal-distance weights.

    kappa = (p_o - p_e) / (1 - p_e), where p_o is the weighted observed
    agreement and p_e the weighted agreement expected from the marginals.
    Raises DegenerateMarginals when p_e == 1 (both sequences constant and
    identical), where the statistic is undefined.
    """
    counts = confusion_matrix(y_true, y_pred, num_classes).astype(np.float64)
    n = counts.sum()
    weights = _agreement_weights(num_classes, weighting)
    p_obs = float((weights * counts).sum() / n)
    row = counts.sum(axis=1)
    col = counts.sum(axis=0)
    p_exp = float((weights * np.outer(row, col)).sum() / (n * n))
    if 1.0 - p_exp < 1e-12:
        raise DegenerateMarginals(
            "both raters constant and identical; kappa undefined")
    return (p_obs - p_exp) / (1.0 - p_exp)


# ---------------------------------------------------------------------------
# Patient-level prediction
# ---------------------------------------------------------------------------

def predict_probs(spec: nn.ModelSpec, params: nn.ParamVector,
                  images: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Per-image softmax probabilities, evaluated in fixed-size chunks."""
    outs = []
    for start in range(0, images.shape[0], chunk):
        logits = nn.forward(spec, params, images[start:start + chunk])
        outs.append(nn.softmax(logits.astype(np.float64)))
    return np.concatenate(outs, axis=0)


def patient_level_predict(spec: nn.ModelSpec, params: nn.ParamVector,
                          site, split: str):
    """Average each patient's softmax vectors, then argmax.

    Returns (patient_ids, y_true, y_pred) sorted by patient id. Ties in the
    averaged probability vector resolve toward the lower class index.
    """
    idx = site.split_indices(split)
    if idx.size == 0:
        raise InvalidShape(f"split {split!r} is empty")
    probs = predict_probs(spec, params, site.images[idx])
    labels = site.labels[idx]
    pids = site.patient_ids[idx]

    order = np.argsort(pids, kind="stable")
    pids_sorted = pids[order]
    unique_ids, starts = np.unique(pids_sorted, return_index=True)
    y_true = np.empty(unique_ids.shape[0], dtype=np.int64)
    y_pred = np.empty(unique_ids.shape[0], dtype=np.int64)
    bounds = np.append(starts, pids_sorted.shape[0])
    for i in range(unique_ids.shape[0]):
        rows = order[bounds[i]:bounds[i + 1]]
        mean_probs = probs[rows].mean(axis=0)
        y_pred[i] = int(np.argmax(mean_probs))  # argmax takes the first max
        y_true[i] = labels[rows[0]]
    return unique_ids, y_true, y_pred


def evaluate_kappa(spec: nn.ModelSpec, params: nn.ParamVector, site,
                   split: str) -> float:
    """Patient-level linear weighted kappa of a model on one site split."""
    _, y_true, y_pred = patient_level_predict(spec, params, site, split)
    return weighted_kappa(y_true, y_pred)


# ---------------------------------------------------------------------------
# Cross-site matrix and summaries
# ---------------------------------------------------------------------------

@dataclass
class KappaMatrix:
    """values[i][j] = kappa of the model trained at site i on site j's test set."""

    site_ids: tuple
    values: np.ndarray
    global_row: Optional[np.ndarray] = None

    def diagonal(self) -> np.ndarray:
        return np.diagonal(self.values).copy()

    def offdiagonal(self) -> np.ndarray:
        k = self.values.shape[0]
        mask = ~np.eye(k, dtype=bool)
        return self.values[mask]


@dataclass
class SummaryStats:
    diag_mean: float
    offdiag_mean: float
    rel_improvement_diag: Optional[float] = None
    rel_improvement_offdiag: Optional[float] = None


def cross_site_matrix(spec: nn.ModelSpec, models: Sequence[nn.ParamVector],
                      sites: Sequence, site_ids: Sequence[str],
                      global_params: Optional[nn.ParamVector] = None,
                      split: str = "test") -> KappaMatrix:
    """Evaluate every model on every site's chosen split.

    A degenerate cell (kappa undefined) is recorded as NaN rather than a
    silent zero.
    """
    if len(models) != len(sites) or len(sites) != len(site_ids):
        raise InvalidShape("models, sites, and site_ids must align")
    k = len(sites)
    values = np.empty((k, k), dtype=np.float64)
    for i, model in enumerate(models):
        for j, site in enumerate(sites):
            try:
                values[i, j] = evaluate_kappa(spec, model, site, split)
            except DegenerateMarginals:
                values[i, j] = np.nan
    global_row = None
    if global_params is not None:
        global_row = np.empty(k, dtype=np.float64)
        for j, site in enumerate(sites):
            try:
                global_row[j] = evaluate_kappa(spec, global_params, site, split)
            except DegenerateMarginals:
                global_row[j] = np.nan
    return KappaMatrix(tuple(site_ids), values, global_row)


def summarize(matrix: KappaMatrix,
              baseline: Optional[KappaMatrix] = None) -> SummaryStats:
    """Diagonal / off-diagonal means, plus relative improvement over a baseline.

    Improvements are computed on the unrounded means: (new - base) / base.
    """
    diag_mean = float(matrix.diagonal().mean())
    offdiag_mean = float(matrix.offdiagonal().mean())
    rel_diag = rel_offdiag = None
    if baseline is not None:
        if baseline.values.shape != matrix.values.shape:
            raise InvalidShape("baseline matrix has a different roster size")
        base_diag = float(baseline.diagonal().mean())
        base_off = float(baseline.offdiagonal().mean())
        rel_diag = (diag_mean - base_diag) / base_diag
        rel_offdiag = (offdiag_mean - base_off) / base_off
    return SummaryStats(diag_mean, offdiag_mean, rel_diag, rel_offdiag)


# ---------------------------------------------------------------------------
# Persistence and reporting
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    if np.isnan(x):
        return "nan"
    return format(float(x), ".6g")


def save_matrix_csv(path, matrix: KappaMatrix) -> None:
    """Header row of site ids; one row per training site; optional global row."""
    lines = ["site," + ",".join(matrix.site_ids)]
    for sid, row in zip(matrix.site_ids, matrix.values):
        lines.append(sid + "," + ",".join(_fmt(v) for v in row))
    if matrix.global_row is not None:
        lines.append("global," + ",".join(_fmt(v) for v in matrix.global_row))
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_matrix_csv(path) -> KappaMatrix:
    if not os.path.exists(path):
        raise IoError(f"missing matrix file: {path}")
    with open(path, "r", encoding="ascii") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    header = lines[0].split(",")
    if header[0] != "site":
        raise IoError(f"bad matrix header in {path}")
    site_ids = tuple(header[1:])
    rows, global_row = [], None
    for line in lines[1:]:
        cells = line.split(",")
        vals = np.array([float(c) for c in cells[1:]], dtype=np.float64)
        if cells[0] == "global":
            global_row = vals
        else:
            rows.append(vals)
    return KappaMatrix(site_ids, np.vstack(rows), global_row)


def emit_report(out_dir, matrix_local: KappaMatrix, matrix_fed: KappaMatrix,
                finetuned_diag: Optional[np.ndarray],
                stats: SummaryStats) -> dict:
    """Write the comparison artifacts: CSV per matrix, JSON summary, text report.

    Returns {artifact name: path}. Output bytes are a pure function of the
    inputs.
    """
    os.makedirs(out_dir, exist_ok=True)
    paths = {}

    def emit_csv(name, matrix):
        path = os.path.join(out_dir, name)
        save_matrix_csv(path, matrix)
        paths[name] = path

    emit_csv("local_matrix.csv", matrix_local)
    emit_csv("federated_matrix.csv", matrix_fed)
    if finetuned_diag is not None:
        path = os.path.join(out_dir, "finetuned_diag.csv")
        lines = ["site," + ",".join(matrix_fed.site_ids),
                 "finetuned," + ",".join(_fmt(v) for v in finetuned_diag)]
        with open(path, "w", encoding="ascii", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")
        paths["finetuned_diag.csv"] = path

    local_stats = summarize(matrix_local)
    summary = {
        "diag_mean": stats.diag_mean,
        "offdiag_mean": stats.offdiag_mean,
        "rel_improvement_diag": stats.rel_improvement_diag,
        "rel_improvement_offdiag": stats.rel_improvement_offdiag,
        "baseline_diag_mean": local_stats.diag_mean,
        "baseline_offdiag_mean": local_stats.offdiag_mean,
    }
    summary_path = os.path.join(out_dir, "summary.json")
    with open(summary_path, "w", encoding="ascii", newline="\n") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    paths["summary.json"] = summary_path

    lines = ["Cross-site agreement report", ""]
    lines.append(f"local diag mean      : {local_stats.diag_mean:.2f}")
    lines.append(f"federated diag mean  : {stats.diag_mean:.2f}")
    lines.append(f"local off-diag mean  : {local_stats.offdiag_mean:.2f}")
    lines.append(f"federated off-diag   : {stats.offdiag_mean:.2f}")
    if stats.rel_improvement_diag is not None:
        lines.append(f"diag improvement     : {stats.rel_improvement_diag * 100:.1f}%")
    if stats.rel_improvement_offdiag is not None:
        lines.append(f"off-diag improvement : {stats.rel_improvement_offdiag * 100:.1f}%")
    lines.append("")
    lines.append("per-site kappa (local / federated" +
                 (" / fine-tuned)" if finetuned_diag is not None else ")"))
    local_diag = matrix_local.diagonal()
    fed_diag = matrix_fed.diagonal()
    for i, sid in enumerate(matrix_fed.site_ids):
        row = f"  {sid:10s} {local_diag[i]:+.3f}  {fed_diag[i]:+.3f}"
        if finetuned_diag is not None:
            row += f"  {finetuned_diag[i]:+.3f}"
        lines.append(row)
    if matrix_fed.global_row is not None:
        lines.append("")
        lines.append("global model on each test set: " +
                     ", ".join(_fmt(v) for v in matrix_fed.global_row))
    report_path = os.path.join(out_dir, "report.txt")
    with open(report_path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    paths["report.txt"] = report_path
    return paths

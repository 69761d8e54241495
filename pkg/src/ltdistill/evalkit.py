"""Evaluation of distilled sets: train-from-scratch on synthetic data,
balanced/long-tailed test metrics, coreset baselines, bias diagnostics, and
comparison reports.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore, losses, models
from .datasets import LabeledSet
from .distill import SyntheticSet
from .experts import DivergenceError
from .models import MlpSpec, ParamSet

# Logit put on the assigned class to represent a hard label as soft-label
# logits; softmax of it is one-hot to ~3e-13.
HARD_LABEL_LOGIT = 30.0

METRIC_COLUMNS = ("method", "seed", "acc")  # then recall_c*, macro_p, macro_r, macro_f1


@dataclass
class MetricsRecord:
    method: str
    seed: int
    accuracy: float
    per_class_recall: np.ndarray
    macro_precision: float
    macro_recall: float
    macro_f1: float
    classifier_row_norms: np.ndarray = field(default_factory=lambda: np.zeros(0))
    config_fingerprint: str = ""


def train_on_synthetic(syn: SyntheticSet, spec: MlpSpec, epochs: int, seed: int,
                       lr: float = 0.01, momentum: float = 0.9) -> ParamSet:
    """Train a fresh student on the synthetic set with full-batch SGD on
    soft cross-entropy against softmax(label_logits)."""
    params = models.init_params(spec, seed)
    targets = syn.soft_labels()
    velocity = [(np.zeros_like(w), np.zeros_like(b)) for w, b in params.layers]
    for epoch in range(epochs):
        graph = diffcore.DiffGraph()
        nodes = models.lift_params(graph, params, trainable=True)
        logits = models.forward(graph, nodes, graph.constant(syn.images))
        loss = losses.soft_cross_entropy(graph, logits, graph.constant(targets))
        if not np.isfinite(graph.value(loss)):
            raise DivergenceError(f"synthetic training diverged at epoch {epoch}")
        grads = diffcore.backward(graph, loss)
        for li, (w_id, b_id) in enumerate(nodes):
            w, b = params.layers[li]
            vw, vb = velocity[li]
            vw *= momentum
            vw += grads[w_id]
            vb *= momentum
            vb += grads[b_id].ravel()
            w -= lr * vw
            b -= lr * vb
    return params


def evaluate(params: ParamSet, test: LabeledSet, method: str = "", seed: int = 0,
             fingerprint: str = "") -> MetricsRecord:
    """Argmax evaluation (ties broken toward the lower class index) with
    per-class recall and macro precision/recall/F1.

    Precision of a class that is never predicted is defined as 0.
    """
    preds = models.forward_numpy(params, test.features).argmax(axis=1)
    c = test.num_classes
    accuracy = float((preds == test.labels).mean())
    recall = np.zeros(c)
    precision = np.zeros(c)
    f1 = np.zeros(c)
    for k in range(c):
        actual = test.labels == k
        predicted = preds == k
        tp = float((actual & predicted).sum())
        recall[k] = tp / actual.sum() if actual.any() else 0.0
        precision[k] = tp / predicted.sum() if predicted.any() else 0.0
        denom = precision[k] + recall[k]
        f1[k] = 2 * precision[k] * recall[k] / denom if denom > 0 else 0.0
    return MetricsRecord(
        method=method,
        seed=seed,
        accuracy=accuracy,
        per_class_recall=recall,
        macro_precision=float(precision.mean()),
        macro_recall=float(recall.mean()),
        macro_f1=float(f1.mean()),
        classifier_row_norms=weight_norm_profile(params),
        config_fingerprint=fingerprint,
    )


def _coreset_to_synthetic(images: np.ndarray, assigned: np.ndarray, c: int) -> SyntheticSet:
    logits = np.zeros((len(assigned), c))
    logits[np.arange(len(assigned)), assigned] = HARD_LABEL_LOGIT
    return SyntheticSet(images, logits, assigned, inner_lr=1.0)


def _per_class_pools(d: LabeledSet, ipc: int, rng):
    """Yield (class, pool indices, deficit fill) honoring oversample-on-deficit."""
    for c in range(d.num_classes):
        pool = np.flatnonzero(d.labels == c)
        if len(pool) == 0:
            raise ValueError(f"class {c} is empty")
        deficit = max(0, ipc - len(pool))
        fill = rng.choice(pool, size=deficit, replace=True) if deficit else pool[:0]
        yield c, pool, fill


def random_coreset(d: LabeledSet, ipc: int, seed: int) -> SyntheticSet:
    """Uniform per-class selection without replacement (oversampling only to
    cover a deficit), with hard one-hot labels."""
    rng = np.random.default_rng(seed)
    images, assigned = [], []
    for c, pool, fill in _per_class_pools(d, ipc, rng):
        take = rng.choice(pool, size=min(ipc, len(pool)), replace=False)
        idx = np.concatenate([take, fill])
        images.append(d.features[idx])
        assigned.append(np.full(len(idx), c, dtype=np.int64))
    return _coreset_to_synthetic(
        np.concatenate(images), np.concatenate(assigned), d.num_classes
    )


def kcenter_coreset(d: LabeledSet, ipc: int, seed: int) -> SyntheticSet:
    """Greedy farthest-point selection per class in raw feature space; the
    first center is drawn uniformly."""
    rng = np.random.default_rng(seed)
    images, assigned = [], []
    for c, pool, fill in _per_class_pools(d, ipc, rng):
        feats = d.features[pool]
        k = min(ipc, len(pool))
        chosen = [int(rng.integers(len(pool)))]
        dists = np.linalg.norm(feats - feats[chosen[0]], axis=1)
        while len(chosen) < k:
            nxt = int(np.argmax(dists))
            chosen.append(nxt)
            dists = np.minimum(dists, np.linalg.norm(feats - feats[nxt], axis=1))
        idx = np.concatenate([pool[chosen], fill])
        images.append(d.features[idx])
        assigned.append(np.full(len(idx), c, dtype=np.int64))
    return _coreset_to_synthetic(
        np.concatenate(images), np.concatenate(assigned), d.num_classes
    )


def weight_norm_profile(params: ParamSet) -> np.ndarray:
    """L2 norm of each per-class classifier weight vector (the columns of
    the final weight matrix in this layout)."""
    w, _ = params.layers[-1]
    return np.linalg.norm(w, axis=0)


def metrics_csv_lines(records, fingerprint: str = "") -> list[str]:
    """Metrics CSV lines: provenance comment, header, one row per record."""
    if not records:
        raise ValueError("no records to write")
    c = len(records[0].per_class_recall)
    header = ["method", "seed", "acc"] + [f"recall_c{k}" for k in range(c)] + [
        "macro_p", "macro_r", "macro_f1"]
    lines = [f"# config_fingerprint={fingerprint}", ",".join(header)]
    for r in records:
        cells = [r.method, str(r.seed), f"{r.accuracy:.6f}"]
        cells += [f"{v:.6f}" for v in r.per_class_recall]
        cells += [f"{r.macro_precision:.6f}", f"{r.macro_recall:.6f}", f"{r.macro_f1:.6f}"]
        lines.append(",".join(cells))
    return lines


def write_metrics(path, records, fingerprint: str = "") -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(metrics_csv_lines(records, fingerprint)) + "\n")


def read_metrics(path) -> list[MetricsRecord]:
    """Parse a metrics CSV back into records (norms are not persisted)."""
    with open(path, encoding="utf-8") as f:
        lines = [ln.strip() for ln in f if ln.strip() and not ln.startswith("#")]
    header = lines[0].split(",")
    n_recall = sum(1 for h in header if h.startswith("recall_c"))
    records = []
    for ln in lines[1:]:
        cells = ln.split(",")
        records.append(MetricsRecord(
            method=cells[0],
            seed=int(cells[1]),
            accuracy=float(cells[2]),
            per_class_recall=np.asarray([float(v) for v in cells[3 : 3 + n_recall]]),
            macro_precision=float(cells[3 + n_recall]),
            macro_recall=float(cells[4 + n_recall]),
            macro_f1=float(cells[5 + n_recall]),
        ))
    return records


def compare_report(records) -> tuple[str, str]:
    """Aligned text table plus CSV comparing methods.

    One row per (method, seed) and mean/std aggregate rows per method; std
    uses the sample convention (ddof=1, 0 for a single record), stated in
    the header.
    """
    if not records:
        raise ValueError("no records to report")

    def agg_std(values):
        return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0

    methods = sorted({r.method for r in records})
    cols = ["method", "seed", "acc", "macro_p", "macro_r", "macro_f1"]
    rows = []
    for m in methods:
        group = sorted((r for r in records if r.method == m), key=lambda r: r.seed)
        for r in group:
            rows.append([m, str(r.seed), f"{r.accuracy:.6f}", f"{r.macro_precision:.6f}",
                         f"{r.macro_recall:.6f}", f"{r.macro_f1:.6f}"])
        for label, fn in (("mean", np.mean), ("std", agg_std)):
            vals = [
                fn([r.accuracy for r in group]),
                fn([r.macro_precision for r in group]),
                fn([r.macro_recall for r in group]),
                fn([r.macro_f1 for r in group]),
            ]
            rows.append([m, label] + [f"{v:.6f}" for v in vals])
    csv_text = "\n".join([",".join(cols)] + [",".join(r) for r in rows]) + "\n"
    widths = [max(len(r[i]) for r in [cols] + rows) for i in range(len(cols))]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    text_lines = ["std convention: sample (ddof=1)", fmt.format(*cols)]
    text_lines += [fmt.format(*r) for r in rows]
    return "\n".join(text_lines) + "\n", csv_text

"""Loss zoo: soft-target cross-entropy, the count-reweighted long-tailed
loss used for inner student updates, and trajectory-matching distances.

The long-tailed loss shifts each class logit by -lambda*log(count) and
weights each sample by a mean-one normalization of its class count, so a
student trained on a balanced synthetic set still follows the gradient
statistics of long-tailed training. With uniform counts both effects vanish
and the loss is exactly soft cross-entropy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import DiffGraph, NodeId
from .models import ParamSet, flatten, sq_dist


@dataclass
class LossWeights:
    """Smoothing strength for the count offsets plus the joint-matching
    weights for the representation and classifier branches."""

    lambda_smooth: float = 1.0
    lambda_rep: float = 1.0
    lambda_cls: float = 0.0

    def __post_init__(self):
        if self.lambda_smooth < 0 or self.lambda_rep < 0 or self.lambda_cls < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.lambda_rep + self.lambda_cls <= 0:
            raise ValueError("at least one of lambda_rep/lambda_cls must be positive")


def validate_counts(counts, num_classes=None) -> np.ndarray:
    """Positive per-class counts as a float array; zero counts are rejected
    because the loss takes their logarithm."""
    s = np.asarray(counts, dtype=np.float64)
    if s.ndim != 1 or (num_classes is not None and len(s) != num_classes):
        raise ValueError(f"counts must be a length-{num_classes} vector")
    if (s <= 0).any():
        bad = int(np.flatnonzero(s <= 0)[0])
        raise ValueError(f"class {bad} has count {s[bad]}; log(count) undefined")
    return s


def count_weights(counts) -> np.ndarray:
    """Mean-one sample weights g(s_c) = C * s_c / sum(s)."""
    s = validate_counts(counts)
    return len(s) * s / s.sum()


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Numerically stable row-wise softmax (numpy-side helper)."""
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def soft_cross_entropy(graph: DiffGraph, logits: NodeId, targets: NodeId) -> NodeId:
    """-(1/n) sum_i sum_j targets_ij * log_softmax(logits)_ij as a node.

    Target rows must be probability vectors (checked against the cached
    forward value).
    """
    lv, tv = graph.value(logits), graph.value(targets)
    if lv.shape != tv.shape or lv.ndim != 2:
        raise ValueError(f"logits {lv.shape} and targets {tv.shape} must match, 2-D")
    sums = tv.sum(axis=1)
    if np.abs(sums - 1.0).max() > 1e-9:
        bad = int(np.argmax(np.abs(sums - 1.0)))
        raise ValueError(f"target row {bad} sums to {sums[bad]!r}, expected 1")
    logp = graph.log_softmax(logits)
    total = graph.sum(graph.mul(targets, logp))
    return graph.scale(total, -1.0 / lv.shape[0])


def lc_offsets(counts, lam: float) -> np.ndarray:
    """Per-class logit offsets -lambda * log(s_c)."""
    return -lam * np.log(validate_counts(counts))


def lc_loss(
    graph: DiffGraph,
    logits: NodeId,
    targets: NodeId,
    anchor_classes,
    counts,
    lam: float = 1.0,
) -> NodeId:
    """Count-reweighted, count-offset softmax loss as a graph node.

    Each sample is weighted by g(s_a) for its anchor class a, and class
    logits are shifted by -lambda*log(s_j) inside the softmax. Hard labels
    are the one-hot special case of the soft `targets`. Uniform counts
    reduce exactly (bit-for-bit) to soft_cross_entropy.
    """
    lv = graph.value(logits)
    n, c = lv.shape
    s = validate_counts(counts, c)
    anchors = np.asarray(anchor_classes, dtype=np.int64)
    if anchors.shape != (n,) or anchors.min() < 0 or anchors.max() >= c:
        raise ValueError("anchor_classes must be n integers in [0, C)")
    if np.ptp(s) == 0:
        # Offsets are a common shift and g is identically 1: plain CE.
        return soft_cross_entropy(graph, logits, targets)
    offsets = lc_offsets(s, lam)
    shifted = graph.add(logits, graph.constant(np.broadcast_to(offsets, (n, c))))
    logp = graph.log_softmax(shifted)
    # Fold the 1/n factor and per-sample weights into one constant matrix.
    w = count_weights(s)[anchors] / n
    weighted = graph.mul(graph.constant(np.broadcast_to(w[:, None], (n, c))),
                         graph.mul(targets, logp))
    return graph.scale(graph.sum(weighted), -1.0)


def match_loss(student, expert_end, expert_start) -> float:
    """Normalized squared trajectory distance
    ||student - end||^2 / ||start - end||^2 over flat parameter vectors."""
    student = np.asarray(student, dtype=np.float64)
    den = sq_dist(expert_start, expert_end)
    if den == 0.0:
        raise ValueError("degenerate expert segment: start equals end")
    return sq_dist(student, expert_end) / den


def match_loss_nodes(graph: DiffGraph, student_nodes, expert_end, expert_start) -> NodeId:
    """Trajectory-matching loss over graph nodes.

    `student_nodes` is a sequence of NodeIds and `expert_end`/`expert_start`
    parallel sequences of numpy arrays of the same shapes, one per parameter
    block. The denominator is a fixed scalar; the numerator is built from
    primitives so it stays differentiable w.r.t. the student nodes.
    """
    student_nodes = list(student_nodes)
    if not (len(student_nodes) == len(expert_end) == len(expert_start)):
        raise ValueError("student/end/start block counts differ")
    den = sum(sq_dist(s.ravel(), e.ravel()) for s, e in zip(expert_start, expert_end))
    if den == 0.0:
        raise ValueError("degenerate expert segment: start equals end")
    num = None
    for node, end in zip(student_nodes, expert_end):
        diff = graph.sub(node, graph.constant(np.asarray(end)))
        term = graph.sum(graph.mul(diff, diff))
        num = term if num is None else graph.add(num, term)
    return graph.scale(num, 1.0 / den)


def joint_loss(student: ParamSet, rep_segment, cls_segment, weights: LossWeights) -> float:
    """Weighted sum of backbone matching against the representation expert
    and classifier matching against the classifier expert.

    `rep_segment` and `cls_segment` are (start, end) ParamSet pairs. A branch
    with zero weight is skipped entirely, so its segment may be degenerate.
    """
    total = 0.0
    if weights.lambda_rep > 0:
        start, end = rep_segment
        total += weights.lambda_rep * match_loss(
            flatten(student, "backbone"),
            flatten(end, "backbone"),
            flatten(start, "backbone"),
        )
    if weights.lambda_cls > 0:
        start, end = cls_segment
        total += weights.lambda_cls * match_loss(
            flatten(student, "classifier"),
            flatten(end, "classifier"),
            flatten(start, "classifier"),
        )
    return total

"""Bi-level distillation: unroll student SGD on the synthetic set inside a
DiffGraph, match the unrolled parameters against decoupled expert segments,
and update images, soft-label logits, and the inner step size by one reverse
pass.

The inner-loss gradients are written analytically in graph primitives
(affine/relu/softmax closed forms), so no second-order machinery is needed:
the unrolled update nodes are ordinary graph nodes and a single backward
pass reaches the synthetic leaves. ReLU masks are inserted as constants
(their derivative is zero almost everywhere).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore, losses, models
from .datasets import LabeledSet
from .diffcore import DiffGraph, NodeId
from .experts import (
    STAGE_SYNTHETIC,
    Trajectory,
    TrajectoryFormatError,
    read_container,
    write_container,
)

TAIL_STRATEGIES = ("inherent", "oversample", "noise")
DISTRIBUTIONS = ("balanced", "longtail")

INNER_LR_FLOOR = 1e-6
OUTER_MOMENTUM = 0.5

TRACE_COLUMNS = ("outer_step", "t_rep", "t_cls", "loss_rep", "loss_cls",
                 "loss_total", "inner_lr")


@dataclass
class SyntheticSet:
    """Learnable images and soft-label logits, grouped by assigned class.

    The assigned-class composition is fixed at construction; distillation
    only moves pixel values, label logits, and the shared inner step size.
    Soft labels are always softmax(label_logits), hence valid distributions.
    """

    images: np.ndarray  # n x d
    label_logits: np.ndarray  # n x C
    assigned_class: np.ndarray  # n, sorted ascending
    inner_lr: float

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.label_logits = np.asarray(self.label_logits, dtype=np.float64)
        self.assigned_class = np.asarray(self.assigned_class, dtype=np.int64)
        n = self.images.shape[0]
        if self.label_logits.shape[0] != n or self.assigned_class.shape != (n,):
            raise ValueError("images, label_logits and assigned_class disagree on n")
        if n and (np.diff(self.assigned_class) < 0).any():
            raise ValueError("samples must be grouped by ascending assigned class")
        if self.inner_lr <= 0:
            raise ValueError("inner_lr must stay positive")

    @property
    def num_classes(self) -> int:
        return self.label_logits.shape[1]

    @property
    def class_counts(self) -> np.ndarray:
        return np.bincount(self.assigned_class, minlength=self.num_classes)

    def soft_labels(self) -> np.ndarray:
        return losses.softmax_rows(self.label_logits)

    def copy(self) -> "SyntheticSet":
        return SyntheticSet(
            self.images.copy(),
            self.label_logits.copy(),
            self.assigned_class.copy(),
            self.inner_lr,
        )


@dataclass
class DistillConfig:
    ipc: int = 10
    outer_steps: int = 500
    n_rep: int = 10
    n_cls: int = 5
    m_rep: int = 2
    m_cls: int = 1
    t_minus_rep: int = 0
    t_rep: int = 10
    t_plus_rep: int = 20
    t_minus_cls: int = 0
    t_cls: int = 1
    t_plus_cls: int = 1
    lambda_smooth: float = 1.0
    lambda_rep: float = 1.0
    lambda_cls: float = 0.5
    lr_images: float = 50.0
    lr_label_logits: float = 0.5
    lr_inner_lr: float = 1e-4
    inner_lr_init: float = 0.05
    tail_strategy: str = "oversample"
    distilled_distribution: str = "balanced"
    uniform_counts: bool = False  # ablation switch: feed L^c uniform counts
    noise_label_magnitude: float = 6.0
    seed: int = 0

    def __post_init__(self):
        if self.ipc < 1:
            raise ValueError("ipc must be >= 1")
        if self.outer_steps < 0 or self.n_rep < 0 or self.n_cls < 0:
            raise ValueError("step counts must be nonnegative")
        if self.m_rep < 1 or self.m_cls < 1:
            raise ValueError("expert segment lengths must be >= 1")
        for tag in ("rep", "cls"):
            lo = getattr(self, f"t_minus_{tag}")
            mid = getattr(self, f"t_{tag}")
            hi = getattr(self, f"t_plus_{tag}")
            if not 0 <= lo <= mid <= hi:
                raise ValueError(
                    f"segment bounds need 0 <= t_minus_{tag} <= t_{tag} <= t_plus_{tag}"
                )
        if min(self.lr_images, self.lr_label_logits, self.lr_inner_lr) < 0:
            raise ValueError("outer step sizes must be nonnegative")
        if self.inner_lr_init <= 0:
            raise ValueError("inner_lr_init must be > 0")
        if self.lambda_smooth < 0 or self.lambda_rep < 0 or self.lambda_cls < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.lambda_rep + self.lambda_cls <= 0:
            raise ValueError("at least one matching branch must have positive weight")
        if self.tail_strategy not in TAIL_STRATEGIES:
            raise ValueError(f"tail_strategy must be one of {TAIL_STRATEGIES}")
        if self.distilled_distribution not in DISTRIBUTIONS:
            raise ValueError(f"distilled_distribution must be one of {DISTRIBUTIONS}")


@dataclass
class LossRecord:
    outer_step: int
    t_rep: int
    t_cls: int
    loss_rep: float
    loss_cls: float
    loss_total: float
    inner_lr: float


def synthetic_class_targets(d: LabeledSet, cfg: DistillConfig) -> np.ndarray:
    """Per-class synthetic sample counts.

    Balanced mode: IPC each. Longtail mode: the target's relative counts
    apportioned (largest remainder) to the same total C*IPC, with at least
    one sample per class.
    """
    c = d.num_classes
    if cfg.distilled_distribution == "balanced":
        return np.full(c, cfg.ipc, dtype=np.int64)
    total = c * cfg.ipc
    quotas = total * d.class_counts / d.class_counts.sum()
    base = np.floor(quotas).astype(np.int64)
    remainder_order = np.lexsort((np.arange(c), -(quotas - base)))
    for i in range(total - base.sum()):
        base[remainder_order[i % c]] += 1
    # Guarantee every class survives, taking from the largest class.
    while (base == 0).any():
        base[int(np.argmax(base))] -= 1
        base[int(np.flatnonzero(base == 0)[0])] += 1
    return base


def init_synthetic(d: LabeledSet, cls_expert: Trajectory, cfg: DistillConfig) -> SyntheticSet:
    """Sample real images per class and initialize soft labels from the
    classifier expert's final logits.

    Class deficits follow cfg.tail_strategy: `inherent` keeps fewer samples,
    `oversample` duplicates real ones, `noise` fills with unit-Gaussian
    images whose label logits are one-hot at cfg.noise_label_magnitude.
    """
    rng = np.random.default_rng([cfg.seed, 0])
    final = cls_expert.snapshots[-1]
    targets = synthetic_class_targets(d, cfg)
    images, logits, assigned = [], [], []
    for c in range(d.num_classes):
        pool = np.flatnonzero(d.labels == c)
        want = int(targets[c])
        n_noise = 0
        if len(pool) >= want:
            picks = rng.choice(pool, size=want, replace=False)
        elif cfg.tail_strategy == "inherent":
            if len(pool) == 0:
                raise ValueError(
                    f"class {c} has no samples; inherent strategy cannot seed it"
                )
            picks = pool.copy()
        elif cfg.tail_strategy == "oversample":
            if len(pool) == 0:
                raise ValueError(f"class {c} has no samples to oversample")
            extra = rng.choice(pool, size=want - len(pool), replace=True)
            picks = np.concatenate([pool, extra])
        else:  # noise
            picks = pool.copy()
            n_noise = want - len(pool)
        real = d.features[picks]
        li = models.forward_numpy(final, real) if len(real) else np.zeros((0, d.num_classes))
        if n_noise:
            real = np.concatenate([real, rng.standard_normal((n_noise, d.dim))])
            onehot = np.zeros((n_noise, d.num_classes))
            onehot[:, c] = cfg.noise_label_magnitude
            li = np.concatenate([li, onehot])
        images.append(real)
        logits.append(li)
        assigned.append(np.full(len(real), c, dtype=np.int64))
    return SyntheticSet(
        np.concatenate(images),
        np.concatenate(logits),
        np.concatenate(assigned),
        cfg.inner_lr_init,
    )


def sample_segments(cfg: DistillConfig, rep: Trajectory, cls: Trajectory,
                    outer_step_index: int, rng) -> tuple[int, int]:
    """Draw segment start epochs for both branches.

    Each branch draws uniformly from [t_minus, cap] where the cap grows
    linearly from t at step 0 to t_plus at the final outer step, easing the
    student toward harder (later) expert segments.
    """
    out = []
    for tag, traj, m in (("rep", rep, cfg.m_rep), ("cls", cls, cfg.m_cls)):
        lo = getattr(cfg, f"t_minus_{tag}")
        mid = getattr(cfg, f"t_{tag}")
        hi = getattr(cfg, f"t_plus_{tag}")
        if hi > traj.epochs - m:
            raise ValueError(
                f"t_plus_{tag}={hi} exceeds trajectory bound {traj.epochs - m} "
                f"(epochs={traj.epochs}, segment={m})"
            )
        if cfg.outer_steps <= 1:
            cap = mid
        else:
            progress = outer_step_index / (cfg.outer_steps - 1)
            cap = mid + int(np.floor(progress * (hi - mid) + 0.5))
        out.append(int(rng.integers(lo, cap + 1)))
    return out[0], out[1]


# -- gradient-as-graph construction ------------------------------------------


@dataclass
class _SynNodes:
    images: NodeId
    label_logits: NodeId
    targets: NodeId  # softmax(label_logits)
    inner_lr: NodeId


def _lift_synthetic(graph: DiffGraph, syn: SyntheticSet) -> _SynNodes:
    images = graph.leaf(syn.images)
    label_logits = graph.leaf(syn.label_logits)
    inner_lr = graph.leaf(np.float64(syn.inner_lr))
    targets = graph.softmax(label_logits)
    return _SynNodes(images, label_logits, targets, inner_lr)


def _lc_constants(graph: DiffGraph, syn: SyntheticSet, counts, lam: float):
    """Constant per-sample weight matrix (g/n) and logit-offset matrix for
    the inner loss; offsets are omitted when counts are uniform (they cancel
    in the softmax, keeping the balanced case exactly cross-entropy)."""
    s = losses.validate_counts(counts, syn.num_classes)
    n, c = syn.label_logits.shape
    w = losses.count_weights(s)[syn.assigned_class] / n
    weight_mat = graph.constant(np.broadcast_to(w[:, None], (n, c)))
    if np.ptp(s) == 0:
        return weight_mat, None
    offsets = losses.lc_offsets(s, lam)
    return weight_mat, graph.constant(np.broadcast_to(offsets, (n, c)))


def _lc_dlogits(graph, logits, targets, weight_mat, offset_mat):
    """d(inner loss)/d(logits) = (g/n) * (P - T), built from primitives."""
    z = logits if offset_mat is None else graph.add(logits, offset_mat)
    p = graph.softmax(z)
    return graph.mul(weight_mat, graph.sub(p, targets))


def _affine_chain_grads(graph, trace: models.ForwardTrace, param_nodes, dlogits):
    """Backpropagate dlogits through the affine/relu stack analytically,
    returning (dW, db) node pairs aligned with param_nodes. ReLU masks enter
    as constants: the mask's own derivative is zero almost everywhere."""
    ones_t = graph.transpose(trace.ones)
    grads: list = [None] * len(param_nodes)
    d_act = dlogits
    for layer in reversed(range(len(param_nodes))):
        w_id, _ = param_nodes[layer]
        dw = graph.matmul(graph.transpose(trace.inputs[layer]), d_act)
        db = graph.matmul(ones_t, d_act)
        grads[layer] = (dw, db)
        if layer > 0:
            dh = graph.matmul(d_act, graph.transpose(w_id))
            mask = (graph.value(trace.pre_acts[layer - 1]) > 0).astype(np.float64)
            d_act = graph.mul(dh, graph.constant(mask))
    return grads


def _step_params(graph, param_nodes, grad_nodes, lr_node):
    flat_p = [nid for pair in param_nodes for nid in pair]
    flat_g = [nid for pair in grad_nodes for nid in pair]
    stepped = diffcore.inner_sgd_step(graph, flat_p, flat_g, lr_node)
    return [(stepped[i], stepped[i + 1]) for i in range(0, len(stepped), 2)]


def inner_unroll_rep(graph: DiffGraph, start: models.ParamSet, nodes: _SynNodes,
                     syn: SyntheticSet, counts, cfg: DistillConfig):
    """Unroll n_rep full-model SGD steps on the synthetic set under the
    long-tailed inner loss, starting from an expert snapshot (constants).
    Returns the stepped (weight, bias) node pairs."""
    param_nodes = models.lift_params(graph, start, trainable=False)
    weight_mat, offset_mat = _lc_constants(graph, syn, counts, cfg.lambda_smooth)
    for _ in range(cfg.n_rep):
        logits, trace = models.forward(graph, param_nodes, nodes.images, trace=True)
        dlogits = _lc_dlogits(graph, logits, nodes.targets, weight_mat, offset_mat)
        grads = _affine_chain_grads(graph, trace, param_nodes, dlogits)
        param_nodes = _step_params(graph, param_nodes, grads, nodes.inner_lr)
    return param_nodes


def inner_unroll_cls(graph: DiffGraph, backbone: models.ParamSet,
                     classifier: tuple[np.ndarray, np.ndarray], nodes: _SynNodes,
                     syn: SyntheticSet, counts, cfg: DistillConfig):
    """Unroll n_cls classifier-only steps: the frozen backbone contributes
    features once, and only the final affine layer is stepped."""
    n = syn.images.shape[0]
    ones = graph.constant(np.ones((n, 1)))
    ones_t = graph.transpose(ones)
    h = nodes.images
    for w, b in backbone.layers[:-1]:
        w_id, b_id = graph.constant(w), graph.constant(b.reshape(1, -1))
        h = graph.relu(graph.add(graph.matmul(h, w_id), graph.matmul(ones, b_id)))
    feats = h
    w_node = graph.constant(classifier[0])
    b_node = graph.constant(classifier[1].reshape(1, -1))
    weight_mat, offset_mat = _lc_constants(graph, syn, counts, cfg.lambda_smooth)
    for _ in range(cfg.n_cls):
        logits = graph.add(graph.matmul(feats, w_node), graph.matmul(ones, b_node))
        dlogits = _lc_dlogits(graph, logits, nodes.targets, weight_mat, offset_mat)
        dw = graph.matmul(graph.transpose(feats), dlogits)
        db = graph.matmul(ones_t, dlogits)
        w_node, b_node = diffcore.inner_sgd_step(
            graph, [w_node, b_node], [dw, db], nodes.inner_lr
        )
    return w_node, b_node


def _blocks(params: models.ParamSet, subset: str):
    """Per-layer arrays shaped like the lifted graph nodes (bias as a row)."""
    return [arr for w, b in models._select(params.layers, subset)
            for arr in (w, b.reshape(1, -1))]


def _segment(traj: Trajectory, t: int, m: int):
    return traj.snapshots[t], traj.snapshots[t + m]


def _degenerate(traj: Trajectory, t: int, m: int, subset: str) -> bool:
    start, end = _segment(traj, t, m)
    return models.sq_dist(models.flatten(start, subset), models.flatten(end, subset)) == 0.0


def build_matching_graph(syn: SyntheticSet, rep: Trajectory, cls: Trajectory,
                         t_rep: int, t_cls: int, counts, cfg: DistillConfig):
    """Assemble one graph holding both branch unrolls and the joint loss.

    Returns (graph, syn nodes, total node, rep loss value, cls loss value).
    """
    graph = DiffGraph()
    nodes = _lift_synthetic(graph, syn)
    total = None
    loss_rep_val = loss_cls_val = 0.0
    if cfg.lambda_rep > 0:
        start, end = _segment(rep, t_rep, cfg.m_rep)
        student = inner_unroll_rep(graph, start, nodes, syn, counts, cfg)
        student_backbone = [nid for pair in student[:-1] for nid in pair]
        loss_rep = losses.match_loss_nodes(
            graph, student_backbone, _blocks(end, "backbone"), _blocks(start, "backbone")
        )
        loss_rep_val = float(graph.value(loss_rep))
        total = graph.scale(loss_rep, float(cfg.lambda_rep))
    if cfg.lambda_cls > 0:
        start, end = _segment(cls, t_cls, cfg.m_cls)
        w_node, b_node = inner_unroll_cls(
            graph, start, start.layers[-1], nodes, syn, counts, cfg
        )
        loss_cls = losses.match_loss_nodes(
            graph, [w_node, b_node], _blocks(end, "classifier"), _blocks(start, "classifier")
        )
        loss_cls_val = float(graph.value(loss_cls))
        term = graph.scale(loss_cls, float(cfg.lambda_cls))
        total = term if total is None else graph.add(total, term)
    return graph, nodes, total, loss_rep_val, loss_cls_val


@dataclass
class OuterState:
    """Momentum buffers for the outer optimizer."""

    v_images: np.ndarray
    v_label_logits: np.ndarray
    v_inner_lr: float = 0.0

    @classmethod
    def zeros(cls, syn: SyntheticSet) -> "OuterState":
        return cls(np.zeros_like(syn.images), np.zeros_like(syn.label_logits))


def outer_step(syn: SyntheticSet, rep: Trajectory, cls: Trajectory, counts,
               cfg: DistillConfig, rng, state: OuterState | None = None,
               step_index: int = 0) -> tuple[SyntheticSet, LossRecord]:
    """One outer update: sample segments, unroll both branches, backward,
    and step images / label logits / inner_lr with momentum 0.5.

    A degenerate expert segment is resampled once before failing. `state`
    carries momentum between calls; None starts from rest.
    """
    if state is None:
        state = OuterState.zeros(syn)
    t_rep = t_cls = None
    for attempt in range(2):
        cand_rep, cand_cls = sample_segments(cfg, rep, cls, step_index, rng)
        bad = (cfg.lambda_rep > 0 and _degenerate(rep, cand_rep, cfg.m_rep, "backbone")) or (
            cfg.lambda_cls > 0 and _degenerate(cls, cand_cls, cfg.m_cls, "classifier")
        )
        if not bad:
            t_rep, t_cls = cand_rep, cand_cls
            break
    if t_rep is None:
        raise ValueError("degenerate expert segment persisted after one resample")

    graph, nodes, total, loss_rep_val, loss_cls_val = build_matching_graph(
        syn, rep, cls, t_rep, t_cls, counts, cfg
    )
    grads = diffcore.backward(graph, total)
    g_img = grads.get(nodes.images, np.zeros_like(syn.images))
    g_ll = grads.get(nodes.label_logits, np.zeros_like(syn.label_logits))
    g_lr = float(grads.get(nodes.inner_lr, 0.0))

    state.v_images = OUTER_MOMENTUM * state.v_images + g_img
    state.v_label_logits = OUTER_MOMENTUM * state.v_label_logits + g_ll
    state.v_inner_lr = OUTER_MOMENTUM * state.v_inner_lr + g_lr
    new_syn = SyntheticSet(
        syn.images - cfg.lr_images * state.v_images,
        syn.label_logits - cfg.lr_label_logits * state.v_label_logits,
        syn.assigned_class.copy(),
        max(INNER_LR_FLOOR, syn.inner_lr - cfg.lr_inner_lr * state.v_inner_lr),
    )
    record = LossRecord(
        outer_step=step_index,
        t_rep=t_rep,
        t_cls=t_cls,
        loss_rep=loss_rep_val,
        loss_cls=loss_cls_val,
        loss_total=float(graph.value(total)),
        inner_lr=syn.inner_lr,
    )
    return new_syn, record


def distill(d: LabeledSet, rep_pool, cls_pool, cfg: DistillConfig):
    """Full distillation loop over expert pools.

    Initializes the synthetic set from a pool classifier expert, then runs
    cfg.outer_steps outer updates, each against a randomly drawn pair of
    experts. Returns (synthetic set, loss records). Deterministic under
    cfg.seed and fixed pools.
    """
    if not rep_pool or not cls_pool:
        raise ValueError("expert pools must be nonempty")
    counts = (
        np.ones(d.num_classes, dtype=np.int64)
        if cfg.uniform_counts
        else d.class_counts.copy()
    )
    rng = np.random.default_rng([cfg.seed, 1])
    syn = init_synthetic(d, cls_pool[int(rng.integers(len(cls_pool)))], cfg)
    state = OuterState.zeros(syn)
    records = []
    for k in range(cfg.outer_steps):
        rep = rep_pool[int(rng.integers(len(rep_pool)))]
        cls = cls_pool[int(rng.integers(len(cls_pool)))]
        syn, record = outer_step(syn, rep, cls, counts, cfg, rng, state, step_index=k)
        records.append(record)
    return syn, records


def per_class_image_grad_norms(syn: SyntheticSet, rep: Trajectory, cls: Trajectory,
                               counts, cfg: DistillConfig, t_rep: int, t_cls: int):
    """L2 norm of d(matching loss)/d(images) pooled per assigned class.

    Diagnostic for how the inner loss distributes distillation pressure
    across classes.
    """
    graph, nodes, total, _, _ = build_matching_graph(
        syn, rep, cls, t_rep, t_cls, counts, cfg
    )
    g_img = diffcore.backward(graph, total).get(nodes.images, np.zeros_like(syn.images))
    norms = np.zeros(syn.num_classes)
    for c in range(syn.num_classes):
        block = g_img[syn.assigned_class == c]
        norms[c] = np.linalg.norm(block)
    return norms


# -- persistence -------------------------------------------------------------


def save_synthetic(path, syn: SyntheticSet, fingerprint: str = "") -> None:
    """Persist in the trajectory container format, stage "synthetic", with
    the label logits appended to the image payload."""
    header = {
        "kind": STAGE_SYNTHETIC,
        "stage": STAGE_SYNTHETIC,
        "dim": syn.images.shape[1],
        "num_classes": syn.num_classes,
        "class_counts": [int(c) for c in syn.class_counts],
        "inner_lr": float(syn.inner_lr),
        "fingerprint": fingerprint,
    }
    payload = (
        syn.images.astype("<f8").tobytes() + syn.label_logits.astype("<f8").tobytes()
    )
    write_container(path, header, payload)


def load_synthetic(path) -> SyntheticSet:
    header, payload = read_container(path)
    if header.get("kind") != STAGE_SYNTHETIC:
        raise TrajectoryFormatError(
            f"{path}: container holds {header.get('kind')!r}, not a synthetic set"
        )
    counts = np.asarray(header["class_counts"], dtype=np.int64)
    n, d, c = int(counts.sum()), header["dim"], header["num_classes"]
    expected = (n * d + n * c) * 8
    if len(payload) != expected:
        raise TrajectoryFormatError(
            f"{path}: payload holds {len(payload)} bytes, expected {expected}"
        )
    images = np.frombuffer(payload, dtype="<f8", count=n * d).reshape(n, d)
    label_logits = np.frombuffer(payload, dtype="<f8", count=n * c, offset=n * d * 8)
    assigned = np.repeat(np.arange(c, dtype=np.int64), counts)
    return SyntheticSet(
        images.astype(np.float64),
        label_logits.reshape(n, c).astype(np.float64),
        assigned,
        header["inner_lr"],
    )


def write_trace(path, records, fingerprint: str = "") -> None:
    """Loss-trace CSV; one row per outer step, inner_lr as used that step."""
    lines = [f"# config_fingerprint={fingerprint}", ",".join(TRACE_COLUMNS)]
    for r in records:
        lines.append(
            f"{r.outer_step},{r.t_rep},{r.t_cls},{r.loss_rep:.10g},"
            f"{r.loss_cls:.10g},{r.loss_total:.10g},{r.inner_lr:.10g}"
        )
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")

"""Dense float64 tensors and a reverse-mode differentiable computation graph.

Values are plain numpy float64 arrays, validated to be finite on entry. A
DiffGraph records primitive operations eagerly (each node caches its forward
value at creation time) and replays the tape backwards to accumulate
gradients for the nodes marked as leaves. SGD updates can themselves be
recorded as graph nodes (`inner_sgd_step`), so a single reverse pass
differentiates an unrolled inner optimization with respect to whatever feeds
it: inputs, soft targets, or the step size itself.
"""

from __future__ import annotations

import numpy as np

# Node handles are plain indices into the owning graph's tape.
NodeId = int


class ShapeError(ValueError):
    """Operand shapes do not conform to a primitive's rule."""


def as_tensor(data) -> np.ndarray:
    """Coerce to a float64 ndarray, rejecting NaN/Inf entries."""
    arr = np.array(data, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite values")
    return arr


class _Node:
    __slots__ = ("op", "inputs", "value", "extra")

    def __init__(self, op, inputs, value, extra=None):
        self.op = op
        self.inputs = inputs
        self.value = value
        self.extra = extra


class DiffGraph:
    """Append-only tape of differentiable operations.

    A node may only reference earlier nodes, so the tape is acyclic and
    already in topological order. Forward values are computed when the node
    is appended and are immutable afterwards (the arrays are write-locked).
    A graph is meant to be built and consumed by a single unit of work.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._leaves: set[int] = set()

    def __len__(self) -> int:
        return len(self._nodes)

    def _push(self, op, inputs, value, extra=None) -> NodeId:
        # np.array (not ascontiguousarray) so 0-d scalars keep their shape.
        value = np.array(value, dtype=np.float64, order="C")
        value.flags.writeable = False
        self._nodes.append(_Node(op, inputs, value, extra))
        return len(self._nodes) - 1

    def _val(self, nid: NodeId) -> np.ndarray:
        try:
            return self._nodes[nid].value
        except IndexError:
            raise KeyError(f"node {nid} does not exist in this graph") from None

    def _check(self, ok: bool, op: str, *shapes) -> None:
        if not ok:
            detail = " and ".join(str(tuple(s)) for s in shapes)
            raise ShapeError(f"{op}: incompatible shapes {detail}")

    # -- node introspection ------------------------------------------------

    def value(self, nid: NodeId) -> np.ndarray:
        """Cached forward value of a node (read-only array)."""
        return self._val(nid)

    def is_leaf(self, nid: NodeId) -> bool:
        return nid in self._leaves

    @property
    def leaves(self) -> tuple[NodeId, ...]:
        return tuple(sorted(self._leaves))

    # -- inputs ------------------------------------------------------------

    def leaf(self, data) -> NodeId:
        """Insert a tensor marked as a differentiation target."""
        nid = self._push("leaf", (), as_tensor(data))
        self._leaves.add(nid)
        return nid

    def constant(self, data) -> NodeId:
        """Insert a tensor that backward treats as fixed."""
        return self._push("const", (), as_tensor(data))

    # -- primitives ----------------------------------------------------------

    def add(self, a: NodeId, b: NodeId) -> NodeId:
        va, vb = self._val(a), self._val(b)
        self._check(va.shape == vb.shape, "add", va.shape, vb.shape)
        return self._push("add", (a, b), va + vb)

    def sub(self, a: NodeId, b: NodeId) -> NodeId:
        va, vb = self._val(a), self._val(b)
        self._check(va.shape == vb.shape, "sub", va.shape, vb.shape)
        return self._push("sub", (a, b), va - vb)

    def mul(self, a: NodeId, b: NodeId) -> NodeId:
        """Elementwise product; shapes must match exactly."""
        va, vb = self._val(a), self._val(b)
        self._check(va.shape == vb.shape, "mul", va.shape, vb.shape)
        return self._push("mul", (a, b), va * vb)

    def scale(self, x: NodeId, s) -> NodeId:
        """Multiply tensor x by a scalar.

        `s` is a scalar NodeId (gradient flows into it, e.g. a learnable
        step size) or a python float for a fixed coefficient. Plain ints are
        interpreted as NodeIds.
        """
        if isinstance(s, float):
            s = self.constant(s)
        vx, vs = self._val(x), self._val(s)
        self._check(vs.size == 1, "scale", vx.shape, vs.shape)
        return self._push("scale", (x, s), vx * vs.item())

    def matmul(self, a: NodeId, b: NodeId) -> NodeId:
        va, vb = self._val(a), self._val(b)
        self._check(
            va.ndim == 2 and vb.ndim == 2 and va.shape[1] == vb.shape[0],
            "matmul", va.shape, vb.shape,
        )
        return self._push("matmul", (a, b), va @ vb)

    def transpose(self, a: NodeId) -> NodeId:
        va = self._val(a)
        self._check(va.ndim == 2, "transpose", va.shape)
        return self._push("transpose", (a,), va.T)

    def relu(self, a: NodeId) -> NodeId:
        """max(x, 0); the subgradient at exactly 0 is taken as 0."""
        va = self._val(a)
        return self._push("relu", (a,), np.maximum(va, 0.0))

    def log_softmax(self, a: NodeId) -> NodeId:
        """Row-wise log softmax of a matrix."""
        va = self._val(a)
        self._check(va.ndim == 2, "log_softmax", va.shape)
        shifted = va - va.max(axis=1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        return self._push("log_softmax", (a,), shifted - lse)

    def softmax(self, a: NodeId) -> NodeId:
        """Row-wise softmax of a matrix."""
        va = self._val(a)
        self._check(va.ndim == 2, "softmax", va.shape)
        shifted = va - va.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return self._push("softmax", (a,), e / e.sum(axis=1, keepdims=True))

    def sum(self, a: NodeId) -> NodeId:
        """Reduce all elements to a scalar."""
        return self._push("sum", (a,), self._val(a).sum())

    def mean(self, a: NodeId) -> NodeId:
        va = self._val(a)
        self._check(va.size >= 1, "mean", va.shape)
        return self._push("mean", (a,), va.mean())

    def gather_rows(self, a: NodeId, indices) -> NodeId:
        """Select rows of a matrix by integer index (duplicates allowed)."""
        va = self._val(a)
        idx = np.asarray(indices, dtype=np.int64)
        self._check(va.ndim == 2 and idx.ndim == 1, "gather_rows", va.shape, idx.shape)
        if idx.size and (idx.min() < 0 or idx.max() >= va.shape[0]):
            raise IndexError(f"gather_rows: index out of range for {va.shape[0]} rows")
        return self._push("gather_rows", (a,), va[idx], extra=idx.copy())


# -- reverse pass ----------------------------------------------------------


def _vjp_add(node, vals, g):
    return ((node.inputs[0], g), (node.inputs[1], g))


def _vjp_sub(node, vals, g):
    return ((node.inputs[0], g), (node.inputs[1], -g))


def _vjp_mul(node, vals, g):
    va, vb = vals
    return ((node.inputs[0], g * vb), (node.inputs[1], g * va))


def _vjp_scale(node, vals, g):
    vx, vs = vals
    ds = np.asarray((g * vx).sum()).reshape(vs.shape)
    return ((node.inputs[0], g * vs.item()), (node.inputs[1], ds))


def _vjp_matmul(node, vals, g):
    va, vb = vals
    return ((node.inputs[0], g @ vb.T), (node.inputs[1], va.T @ g))


def _vjp_transpose(node, vals, g):
    return ((node.inputs[0], g.T),)


def _vjp_relu(node, vals, g):
    return ((node.inputs[0], g * (vals[0] > 0.0)),)


def _vjp_log_softmax(node, vals, g):
    p = np.exp(node.value)
    return ((node.inputs[0], g - p * g.sum(axis=1, keepdims=True)),)


def _vjp_softmax(node, vals, g):
    p = node.value
    return ((node.inputs[0], p * (g - (g * p).sum(axis=1, keepdims=True))),)


def _vjp_sum(node, vals, g):
    return ((node.inputs[0], np.full(vals[0].shape, g.item())),)


def _vjp_mean(node, vals, g):
    v = vals[0]
    return ((node.inputs[0], np.full(v.shape, g.item() / v.size)),)


def _vjp_gather_rows(node, vals, g):
    out = np.zeros(vals[0].shape)
    np.add.at(out, node.extra, g)
    return ((node.inputs[0], out),)


_VJP = {
    "add": _vjp_add,
    "sub": _vjp_sub,
    "mul": _vjp_mul,
    "scale": _vjp_scale,
    "matmul": _vjp_matmul,
    "transpose": _vjp_transpose,
    "relu": _vjp_relu,
    "log_softmax": _vjp_log_softmax,
    "softmax": _vjp_softmax,
    "sum": _vjp_sum,
    "mean": _vjp_mean,
    "gather_rows": _vjp_gather_rows,
}


def backward(graph: DiffGraph, root: NodeId) -> dict[NodeId, np.ndarray]:
    """Gradients of a scalar root with respect to every reachable leaf.

    Returns {leaf NodeId: dRoot/dLeaf}. Leaves the root does not depend on
    are absent from the map; intermediate nodes are never reported. The tape
    order doubles as the topological order, so one reverse sweep suffices.
    """
    nodes = graph._nodes
    root_val = graph.value(root)
    if root_val.size != 1:
        raise ShapeError(f"backward: root must be scalar-shaped, got {root_val.shape}")
    adjoint: dict[int, np.ndarray] = {root: np.ones_like(root_val)}
    grads: dict[int, np.ndarray] = {}
    for nid in range(root, -1, -1):
        g = adjoint.pop(nid, None)
        if g is None:
            continue
        node = nodes[nid]
        if node.op == "leaf":
            grads[nid] = np.array(g)
            continue
        if node.op == "const":
            continue
        vals = tuple(nodes[i].value for i in node.inputs)
        for inp, contrib in _VJP[node.op](node, vals, g):
            held = adjoint.get(inp)
            adjoint[inp] = contrib if held is None else held + contrib
    return grads


def inner_sgd_step(graph: DiffGraph, params, grads, step_size) -> list[NodeId]:
    """Record one SGD update theta' = theta - eta * grad as graph nodes.

    `params` and `grads` are parallel sequences of NodeIds; `step_size` is a
    scalar NodeId (typically a learnable leaf) or a float. Applying this
    repeatedly unrolls an inner optimization whose endpoint remains
    differentiable w.r.t. everything feeding the gradient nodes.
    """
    params, grads = list(params), list(grads)
    if len(params) != len(grads):
        raise ShapeError(
            f"inner_sgd_step: {len(params)} params vs {len(grads)} grads"
        )
    return [graph.sub(p, graph.scale(g, step_size)) for p, g in zip(params, grads)]

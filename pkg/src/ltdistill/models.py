"""Student/expert network: an MLP with an explicit backbone/classifier split.

The classifier is the final affine layer; everything before it is the
backbone. Parameter sets flatten to a single vector (per layer: weights
row-major, then bias) so trajectory distances are plain squared norms over
the chosen subset.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import DiffGraph, NodeId

SUBSETS = ("whole", "backbone", "classifier")


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths (input, hidden..., output); relu between affine layers."""

    widths: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 3:
            raise ValueError("need at least one hidden layer")
        if any(w < 1 for w in self.widths):
            raise ValueError("all widths must be >= 1")

    @property
    def input_dim(self) -> int:
        return self.widths[0]

    @property
    def num_classes(self) -> int:
        return self.widths[-1]

    @property
    def num_layers(self) -> int:
        return len(self.widths) - 1

    def num_params(self, subset: str = "whole") -> int:
        pairs = list(zip(self.widths[:-1], self.widths[1:]))
        pairs = _select(pairs, subset)
        return sum(din * dout + dout for din, dout in pairs)


def _select(layers: list, subset: str) -> list:
    if subset == "whole":
        return layers
    if subset == "backbone":
        return layers[:-1]
    if subset == "classifier":
        return layers[-1:]
    raise ValueError(f"subset must be one of {SUBSETS}, got {subset!r}")


@dataclass
class ParamSet:
    """Ordered (weight, bias) pairs; the final pair is the classifier."""

    layers: list[tuple[np.ndarray, np.ndarray]]

    def __post_init__(self):
        self.layers = [
            (np.asarray(w, dtype=np.float64), np.asarray(b, dtype=np.float64))
            for w, b in self.layers
        ]
        for i, (w, b) in enumerate(self.layers):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"layer {i}: bias shape {b.shape} vs weight {w.shape}")
            if i > 0 and self.layers[i - 1][0].shape[1] != w.shape[0]:
                raise ValueError(f"layer {i - 1} output does not feed layer {i}")

    @property
    def classifier_boundary(self) -> int:
        return len(self.layers) - 1

    @property
    def spec(self) -> MlpSpec:
        widths = [self.layers[0][0].shape[0]] + [w.shape[1] for w, _ in self.layers]
        return MlpSpec(tuple(widths))

    def copy(self) -> "ParamSet":
        return ParamSet([(w.copy(), b.copy()) for w, b in self.layers])


def init_params(spec: MlpSpec, seed: int) -> ParamSet:
    """He-initialized weights (variance 2/fan_in), zero biases."""
    rng = np.random.default_rng(seed)
    layers = []
    for din, dout in zip(spec.widths[:-1], spec.widths[1:]):
        w = rng.standard_normal((din, dout)) * np.sqrt(2.0 / din)
        layers.append((w, np.zeros(dout)))
    return ParamSet(layers)


def lift_params(graph: DiffGraph, params: ParamSet, trainable=True):
    """Insert parameters into a graph as (weight, bias-row) node pairs.

    `trainable` is a bool for all layers or a per-layer sequence; trainable
    layers become leaves, frozen ones constants. Biases enter as 1 x width
    rows so bias broadcasting can be written as ones @ bias.
    """
    n_layers = len(params.layers)
    flags = [trainable] * n_layers if isinstance(trainable, bool) else list(trainable)
    if len(flags) != n_layers:
        raise ValueError("trainable flags do not match layer count")
    pairs = []
    for (w, b), flag in zip(params.layers, flags):
        make = graph.leaf if flag else graph.constant
        pairs.append((make(w), make(b.reshape(1, -1))))
    return pairs


@dataclass
class ForwardTrace:
    """Node ids recorded during a forward pass, used to build analytic
    gradients of the inner loss as graph nodes."""

    inputs: list[NodeId]  # input to each affine layer (x, h1, ...)
    pre_acts: list[NodeId]  # affine outputs before relu; last one is logits
    ones: NodeId  # n x 1 column of ones shared by the bias terms


def forward(graph: DiffGraph, param_nodes, x: NodeId, trace: bool = False):
    """MLP forward pass on graph nodes; returns the n x C logits node.

    With trace=True also returns the ForwardTrace of intermediates.
    """
    n = graph.value(x).shape[0]
    ones = graph.constant(np.ones((n, 1)))
    inputs, pre_acts = [], []
    h = x
    for i, (w, b) in enumerate(param_nodes):
        inputs.append(h)
        a = graph.add(graph.matmul(h, w), graph.matmul(ones, b))
        pre_acts.append(a)
        if i < len(param_nodes) - 1:
            h = graph.relu(a)
    logits = pre_acts[-1]
    if trace:
        return logits, ForwardTrace(inputs, pre_acts, ones)
    return logits


def forward_numpy(params: ParamSet, x: np.ndarray) -> np.ndarray:
    """Plain-numpy forward pass for inference and evaluation."""
    h = np.asarray(x, dtype=np.float64)
    last = len(params.layers) - 1
    for i, (w, b) in enumerate(params.layers):
        h = h @ w + b
        if i < last:
            h = np.maximum(h, 0.0)
    return h


def params_from_nodes(graph: DiffGraph, param_nodes) -> ParamSet:
    """Materialize graph parameter nodes back into a ParamSet."""
    return ParamSet(
        [(graph.value(w).copy(), graph.value(b).ravel().copy()) for w, b in param_nodes]
    )


def flatten(params: ParamSet, subset: str = "whole") -> np.ndarray:
    """Concatenate the chosen subset into one vector (weights then bias)."""
    chunks = []
    for w, b in _select(params.layers, subset):
        chunks.append(w.ravel())
        chunks.append(b)
    return np.concatenate(chunks)

def unflatten(vector: np.ndarray, spec: MlpSpec) -> ParamSet:
    """Inverse of flatten(whole) for the given architecture."""
    vector = np.asarray(vector, dtype=np.float64)
    if vector.shape != (spec.num_params(),):
        raise ValueError(
            f"vector length {vector.shape} does not match spec ({spec.num_params()},)"
        )
    layers, pos = [], 0
    for din, dout in zip(spec.widths[:-1], spec.widths[1:]):
        w = vector[pos : pos + din * dout].reshape(din, dout).copy()
        pos += din * dout
        b = vector[pos : pos + dout].copy()
        pos += dout
        layers.append((w, b))
    return ParamSet(layers)


def sq_dist(a: np.ndarray, b: np.ndarray) -> float:
    """Squared euclidean distance between two flat vectors."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    diff = a - b
    return float(diff @ diff)

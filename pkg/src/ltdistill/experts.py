"""Decoupled expert training and trajectory persistence.

Stage one trains the whole network on the long-tailed target set; stage two
freezes the backbone and fine-tunes only the classifier on a balanced
resample, projecting each per-class weight vector onto an L2 ball after
every step (MaxNorm). Trajectories snapshot the parameters after every
epoch and serialize to a small checksummed binary container.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import diffcore, losses, models
from .datasets import LabeledSet
from .models import MlpSpec, ParamSet

CONTAINER_MAGIC = b"LTDD"
CONTAINER_VERSION = 1

STAGE_REPRESENTATION = "representation"
STAGE_CLASSIFIER = "classifier"
STAGE_SYNTHETIC = "synthetic"


class TrajectoryFormatError(ValueError):
    """Malformed trajectory container (magic/version/checksum/truncation)."""


class DivergenceError(RuntimeError):
    """Training loss became non-finite."""


@dataclass
class TrainConfig:
    epochs: int = 40
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr <= 0:
            raise ValueError("step size must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ValueError("require 0 <= momentum < 1 and weight_decay >= 0")


@dataclass
class MaxNormConfig:
    """Radius of the L2 ball each per-class classifier vector is kept in."""

    radius: float = 1.0

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("MaxNorm radius must be > 0")


@dataclass
class Trajectory:
    """Per-epoch parameter snapshots of one expert (epoch 0 included)."""

    stage: str
    spec: MlpSpec
    snapshots: list[ParamSet]
    fingerprint: str = ""
    seed: int = 0
    per_class_recall: np.ndarray | None = None

    def __post_init__(self):
        for i, snap in enumerate(self.snapshots):
            if snap.spec != self.spec:
                raise ValueError(f"snapshot {i} does not match the architecture spec")

    @property
    def epochs(self) -> int:
        return len(self.snapshots) - 1


def _one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), num_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def _per_class_recall(params: ParamSet, d: LabeledSet) -> np.ndarray:
    preds = models.forward_numpy(params, d.features).argmax(axis=1)
    recall = np.zeros(d.num_classes)
    for c in range(d.num_classes):
        mask = d.labels == c
        recall[c] = (preds[mask] == c).mean() if mask.any() else np.nan
    return recall


def _maxnorm_project(w: np.ndarray, radius: float) -> None:
    # Per-class vectors are the columns of the final weight matrix
    # (logits = h @ W + b).
    norms = np.linalg.norm(w, axis=0)
    over = norms > radius
    if over.any():
        w[:, over] *= radius / norms[over]


def _sgd_epochs(
    params: ParamSet,
    features: np.ndarray,
    targets: np.ndarray,
    cfg: TrainConfig,
    trainable_layers,
    maxnorm: MaxNormConfig | None,
    stage: str,
):
    """Minibatch SGD with momentum and weight decay; yields a snapshot after
    every epoch. Only layers flagged trainable are updated."""
    shuffle_rng = np.random.default_rng([cfg.seed, 1])
    n = len(features)
    velocity = [
        (np.zeros_like(w), np.zeros_like(b)) for w, b in params.layers
    ]
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            batch = order[lo : lo + cfg.batch_size]
            graph = diffcore.DiffGraph()
            nodes = models.lift_params(graph, params, trainable_layers)
            x = graph.constant(features[batch])
            t = graph.constant(targets[batch])
            logits = models.forward(graph, nodes, x)
            loss = losses.soft_cross_entropy(graph, logits, t)
            if not np.isfinite(graph.value(loss)):
                raise DivergenceError(f"{stage} training diverged at epoch {epoch}")
            grads = diffcore.backward(graph, loss)
            for li, (w_id, b_id) in enumerate(nodes):
                if w_id not in grads:
                    continue
                w, b = params.layers[li]
                vw, vb = velocity[li]
                vw *= cfg.momentum
                vw += grads[w_id] + cfg.weight_decay * w
                vb *= cfg.momentum
                vb += grads[b_id].ravel() + cfg.weight_decay * b
                w -= cfg.lr * vw
                b -= cfg.lr * vb
                if maxnorm is not None and li == params.classifier_boundary:
                    _maxnorm_project(w, maxnorm.radius)
        yield epoch, params


def train_representation_expert(
    d: LabeledSet, spec: MlpSpec, cfg: TrainConfig
) -> Trajectory:
    """Stage one: train the full model on the long-tailed set with plain
    cross-entropy on hard labels, snapshotting after every epoch."""
    if len(d) == 0:
        raise ValueError("dataset is empty")
    params = models.init_params(spec, cfg.seed)
    snapshots = [params.copy()]
    targets = _one_hot(d.labels, spec.num_classes)
    for _, current in _sgd_epochs(
        params, d.features, targets, cfg, True, None, STAGE_REPRESENTATION
    ):
        snapshots.append(current.copy())
    return Trajectory(
        stage=STAGE_REPRESENTATION,
        spec=spec,
        snapshots=snapshots,
        fingerprint=d.fingerprint(),
        seed=cfg.seed,
        per_class_recall=_per_class_recall(params, d),
    )


def train_classifier_expert(
    rep: Trajectory, b: LabeledSet, cfg: TrainConfig, maxnorm: MaxNormConfig
) -> Trajectory:
    """Stage two: freeze the backbone at the representation expert's final
    state and fine-tune only the classifier on the balanced set under the
    MaxNorm constraint. Snapshot 0 is the representation expert's endpoint."""
    if np.ptp(b.class_counts) != 0 or (b.class_counts == 0).any():
        raise ValueError(
            f"classifier fine-tuning needs a balanced set, got counts "
            f"{b.class_counts.tolist()}"
        )
    spec = rep.spec
    params = rep.snapshots[-1].copy()
    snapshots = [params.copy()]
    trainable = [False] * (len(params.layers) - 1) + [True]
    targets = _one_hot(b.labels, spec.num_classes)
    for _, current in _sgd_epochs(
        params, b.features, targets, cfg, trainable, maxnorm, STAGE_CLASSIFIER
    ):
        snapshots.append(current.copy())
    return Trajectory(
        stage=STAGE_CLASSIFIER,
        spec=spec,
        snapshots=snapshots,
        fingerprint=b.fingerprint(),
        seed=cfg.seed,
        per_class_recall=_per_class_recall(params, b),
    )


def confidence_profile(params: ParamSet, d: LabeledSet) -> np.ndarray:
    """Per-class mean of the max softmax probability; NaN for empty classes."""
    probs = losses.softmax_rows(models.forward_numpy(params, d.features))
    conf = probs.max(axis=1)
    out = np.full(d.num_classes, np.nan)
    for c in range(d.num_classes):
        mask = d.labels == c
        if mask.any():
            out[c] = conf[mask].mean()
    return out


# -- persistence -------------------------------------------------------------
#
# Container layout: magic "LTDD" | version byte | header length (LE u32) |
# UTF-8 JSON header | payload (LE float64) | CRC32 of payload (LE u32).


def write_container(path, header: dict, payload: bytes) -> None:
    """Atomically write a container file (temp file + rename)."""
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    blob = (
        CONTAINER_MAGIC
        + bytes([CONTAINER_VERSION])
        + struct.pack("<I", len(header_bytes))
        + header_bytes
        + payload
        + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)
    )
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(blob)
    os.replace(tmp, path)


def read_container(path) -> tuple[dict, bytes]:
    """Read and verify a container file; raises TrajectoryFormatError with a
    distinct message for each failure mode."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 4 or blob[:4] != CONTAINER_MAGIC:
        raise TrajectoryFormatError(f"{path}: bad magic, not a trajectory container")
    if len(blob) < 5 or blob[4] != CONTAINER_VERSION:
        found = blob[4] if len(blob) >= 5 else None
        raise TrajectoryFormatError(f"{path}: unsupported version {found}")
    if len(blob) < 9:
        raise TrajectoryFormatError(f"{path}: truncated header")
    (header_len,) = struct.unpack("<I", blob[5:9])
    if len(blob) < 9 + header_len + 4:
        raise TrajectoryFormatError(f"{path}: truncated file")
    try:
        header = json.loads(blob[9 : 9 + header_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TrajectoryFormatError(f"{path}: unreadable header ({exc})") from None
    payload = blob[9 + header_len : -4]
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise TrajectoryFormatError(f"{path}: checksum mismatch, payload corrupted")
    return header, payload


def save_trajectory(path, trajectory: Trajectory) -> None:
    """Serialize snapshots as concatenated flatten(whole) vectors."""
    header = {
        "kind": "trajectory",
        "stage": trajectory.stage,
        "widths": list(trajectory.spec.widths),
        "epochs": trajectory.epochs,
        "seed": trajectory.seed,
        "fingerprint": trajectory.fingerprint,
        "per_class_recall": None
        if trajectory.per_class_recall is None
        else [float(r) for r in trajectory.per_class_recall],
    }
    payload = b"".join(
        models.flatten(snap).astype("<f8").tobytes() for snap in trajectory.snapshots
    )
    write_container(path, header, payload)


def load_trajectory(path) -> Trajectory:
    header, payload = read_container(path)
    if header.get("kind") != "trajectory":
        raise TrajectoryFormatError(f"{path}: container holds {header.get('kind')!r}, "
                                    "not a trajectory")
    spec = MlpSpec(tuple(header["widths"]))
    n_snaps = header["epochs"] + 1
    per_snap = spec.num_params() * 8
    if len(payload) != n_snaps * per_snap:
        raise TrajectoryFormatError(
            f"{path}: payload holds {len(payload)} bytes, expected {n_snaps * per_snap}"
        )
    snapshots = []
    for i in range(n_snaps):
        flat = np.frombuffer(payload, dtype="<f8", count=spec.num_params(),
                             offset=i * per_snap).astype(np.float64)
        snapshots.append(models.unflatten(flat, spec))
    recall = header.get("per_class_recall")
    return Trajectory(
        stage=header["stage"],
        spec=spec,
        snapshots=snapshots,
        fingerprint=header.get("fingerprint", ""),
        seed=header.get("seed", 0),
        per_class_recall=None if recall is None else np.asarray(recall),
    )

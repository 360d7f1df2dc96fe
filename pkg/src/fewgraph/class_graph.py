"""Class-level graph: prototype nodes, cosine edges, attention calibration.

The graph holds one feature vector per class seen so far. New-class
features are calibrated by attending over all nodes (old ones are
read-only context) and added residually, then inserted with recomputed
cosine edges. Prediction is nearest-node by cosine with a smallest-label
tie-break.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nnops, seeding
from .errors import (
    ConfigError,
    DimensionMismatch,
    DuplicateLabel,
    EmptyGraph,
    IoError,
    LabelCollision,
    UnknownLabel,
    ZeroNormPrototype,
    ZeroNormQuery,
)


@dataclass
class ClassGraph:
    labels: np.ndarray  # (m,) int64, insertion order
    features: np.ndarray  # (m, d)
    edges: np.ndarray  # (m, m) cosine similarities
    sessions: np.ndarray  # (m,) int64

    @property
    def node_count(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def label_set(self) -> set[int]:
        return {int(x) for x in self.labels}

    def node(self, label: int) -> np.ndarray:
        pos = np.flatnonzero(self.labels == label)
        if len(pos) == 0:
            raise UnknownLabel(f"no node for label {label}")
        return self.features[pos[0]]

    def copy(self) -> "ClassGraph":
        return ClassGraph(self.labels.copy(), self.features.copy(), self.edges.copy(), self.sessions.copy())


@dataclass
class CalibratedClassFeature:
    label: int
    values: np.ndarray


@dataclass
class AttentionParams:
    """Key/query projections for calibration over class nodes.

    Values are the raw class features (no value projection). `normalize`
    selects softmax weights; the unnormalized variant keeps the raw scaled
    dot products for ablation.
    """

    w_key: np.ndarray
    w_query: np.ndarray
    head_count: int = 1
    normalize: bool = True

    @property
    def dim(self) -> int:
        return self.w_key.shape[0]

    def validate(self) -> None:
        d = self.dim
        if self.w_key.shape != (d, d) or self.w_query.shape != (d, d):
            raise ConfigError("w_key and w_query must be square and equally sized")
        if self.head_count < 1 or d % self.head_count != 0:
            raise ConfigError("head_count must be >= 1 and divide the feature dim")

    def arrays(self) -> list[tuple[str, np.ndarray]]:
        return [("w_key", self.w_key), ("w_query", self.w_query)]

    def copy(self) -> "AttentionParams":
        return AttentionParams(self.w_key.copy(), self.w_query.copy(), self.head_count, self.normalize)

    def zero_grads(self) -> list[np.ndarray]:
        return [np.zeros_like(self.w_key), np.zeros_like(self.w_query)]


def init_attention(dim: int, seed: int, head_count: int = 1, normalize: bool = True,
                   identity: float = 2.0, noise: float = 0.3) -> AttentionParams:
    """Identity-dominant init: fresh calibration leans toward self-attention,
    so new-class features start near their inputs while the noise leaves the
    projections trainable."""
    rng = seeding.derive_rng(seed, seeding.INIT_ATTENTION)
    eye = identity * np.eye(dim)
    params = AttentionParams(
        w_key=eye + rng.uniform(-noise, noise, size=(dim, dim)),
        w_query=eye + rng.uniform(-noise, noise, size=(dim, dim)),
        head_count=head_count,
        normalize=normalize,
    )
    params.validate()
    return params


def _cosine_matrix(features: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(features, axis=1)
    unit = features / norms[:, None]
    return unit @ unit.T


def _check_norms(features: np.ndarray, labels) -> None:
    norms = np.linalg.norm(features, axis=1)
    bad = np.flatnonzero(norms == 0.0)
    if len(bad):
        raise ZeroNormPrototype(f"zero-norm class feature for labels {[int(labels[i]) for i in bad]}")


def _label_values(p) -> tuple[int, np.ndarray]:
    if hasattr(p, "label"):
        return int(p.label), np.asarray(p.values, dtype=np.float64)
    return int(p[0]), np.asarray(p[1], dtype=np.float64)


def build_base_graph(prototypes) -> ClassGraph:
    """Graph over (label, feature) prototypes with cosine edges."""
    pairs = [_label_values(p) for p in prototypes]
    if not pairs:
        raise EmptyGraph("base graph needs at least one prototype")
    labels = np.array([lab for lab, _ in pairs], dtype=np.int64)
    if len(set(labels.tolist())) != len(labels):
        raise DuplicateLabel("duplicate class labels in base prototypes")
    features = np.stack([vec for _, vec in pairs])
    _check_norms(features, labels)
    return ClassGraph(
        labels=labels,
        features=features,
        edges=_cosine_matrix(features),
        sessions=np.zeros(len(labels), dtype=np.int64),
    )


def calibrate_forward(context: np.ndarray, new_feats: np.ndarray, params: AttentionParams):
    """Attention of each new feature over (context + new) nodes, residual add.

    Returns (calibrated (r, d), cache). Context rows are read-only.
    """
    params.validate()
    m = context.shape[0] if context.size else 0
    r, d = new_feats.shape
    if d != params.dim or (m and context.shape[1] != d):
        raise DimensionMismatch("attention dim disagrees with feature dim")
    values = np.vstack([context, new_feats]) if m else new_feats.copy()
    keys = values @ params.w_key
    queries = values @ params.w_query
    hd = d // params.head_count
    out = np.empty((r, d))
    head_caches = []
    for h in range(params.head_count):
        sl = slice(h * hd, (h + 1) * hd)
        scale = np.sqrt(hd)
        scores = (queries[m:, sl] @ keys[:, sl].T) / scale
        weights = nnops.softmax(scores) if params.normalize else scores
        out[:, sl] = weights @ values[:, sl]
        head_caches.append((weights, scale))
    return new_feats + out, (values, keys, queries, m, head_caches)


def calibrate_backward(params: AttentionParams, cache, dout: np.ndarray):
    """Returns (d_new_feats, dW_key, dW_query); context rows get no grads."""
    values, keys, queries, m, head_caches = cache
    d = values.shape[1]
    hd = d // params.head_count
    d_values = np.zeros_like(values)
    d_keys = np.zeros_like(keys)
    d_queries = np.zeros_like(queries)
    for h, (weights, scale) in enumerate(head_caches):
        sl = slice(h * hd, (h + 1) * hd)
        d_out_h = dout[:, sl]
        d_weights = d_out_h @ values[:, sl].T
        d_values[:, sl] += weights.T @ d_out_h
        if params.normalize:
            inner = (d_weights * weights).sum(axis=1, keepdims=True)
            d_scores = weights * (d_weights - inner)
        else:
            d_scores = d_weights
        d_scores = d_scores / scale
        d_queries[m:, sl] += d_scores @ keys[:, sl]
        d_keys[:, sl] += d_scores.T @ queries[m:, sl]
    dw_key = values.T @ d_keys
    dw_query = values.T @ d_queries
    d_values += d_keys @ params.w_key.T
    d_values += d_queries @ params.w_query.T
    d_new = dout + d_values[m:]
    return d_new, dw_key, dw_query


def calibrate(graph: ClassGraph, new_features, params: AttentionParams) -> list[CalibratedClassFeature]:
    """Calibrate refined new-class features against the graph's nodes."""
    labels = [int(f.label) for f in new_features]
    if len(set(labels)) != len(labels):
        raise LabelCollision("duplicate labels among new features")
    overlap = set(labels) & graph.label_set()
    if overlap:
        raise LabelCollision(f"new labels already present in graph: {sorted(overlap)}")
    if not new_features:
        return []
    new_feats = np.stack([np.asarray(f.values, dtype=np.float64) for f in new_features])
    out, _ = calibrate_forward(graph.features, new_feats, params)
    return [CalibratedClassFeature(lab, out[i]) for i, lab in enumerate(labels)]


def insert_calibrated(graph: ClassGraph, calibrated, session: int) -> ClassGraph:
    """New graph with the calibrated nodes appended and edges recomputed."""
    if not calibrated:
        return graph.copy()
    labels = [int(f.label) for f in calibrated]
    if len(set(labels)) != len(labels):
        raise LabelCollision("duplicate labels among calibrated features")
    overlap = set(labels) & graph.label_set()
    if overlap:
        raise LabelCollision(f"labels already present in graph: {sorted(overlap)}")
    new_feats = np.stack([np.asarray(f.values, dtype=np.float64) for f in calibrated])
    _check_norms(new_feats, labels)
    all_labels = np.concatenate([graph.labels, np.array(labels, dtype=np.int64)])
    all_feats = np.vstack([graph.features, new_feats])
    all_sessions = np.concatenate([graph.sessions, np.full(len(labels), session, dtype=np.int64)])
    return ClassGraph(all_labels, all_feats, _cosine_matrix(all_feats), all_sessions)


def predict(graph: ClassGraph, query: np.ndarray):
    """(label, per-node cosine scores); ties go to the smallest label."""
    if graph.node_count == 0:
        raise EmptyGraph("cannot predict against an empty graph")
    q = np.asarray(query, dtype=np.float64).ravel()
    if not np.all(np.isfinite(q)):
        raise ZeroNormQuery("query embedding has non-finite entries")
    qn = np.linalg.norm(q)
    if qn == 0.0:
        raise ZeroNormQuery("query embedding has zero norm")
    if q.size != graph.dim:
        raise DimensionMismatch(f"query dim {q.size} != graph dim {graph.dim}")
    node_norms = np.linalg.norm(graph.features, axis=1)
    scores = (graph.features @ q) / (node_norms * qn)
    best = scores.max()
    winner = int(graph.labels[scores == best].min())
    return winner, scores


def cgn_loss(embeddings: np.ndarray, labels, graph: ClassGraph, scale: float) -> float:
    """Mean cross-entropy of softmax over scaled cosine scores to all nodes."""
    z = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    order = np.argsort(graph.labels)
    pos = np.searchsorted(graph.labels, y, sorter=order)
    if np.any(pos >= graph.node_count) or np.any(graph.labels[order][np.minimum(pos, graph.node_count - 1)] != y):
        raise UnknownLabel("batch contains labels with no node in the graph")
    targets = order[pos]
    loss, _, _ = nnops.cosine_ce(z, targets, graph.features, scale)
    return float(loss)


def export_snapshot(graph: ClassGraph, path: str) -> None:
    """Structured-text dump (6 decimals): nodes, sessions, features, edges."""
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(snapshot_text(graph))
    except OSError as exc:
        raise IoError(f"cannot write graph snapshot {path!r}: {exc}") from exc


def snapshot_text(graph: ClassGraph) -> str:
    lines = ["classgraph v1", f"dim {graph.dim}", f"nodes {graph.node_count}"]
    for i in range(graph.node_count):
        feat = " ".join(f"{v:.6f}" for v in graph.features[i])
        lines.append(f"node {int(graph.labels[i])} {int(graph.sessions[i])} {feat}")
    lines.append("edges")
    for i in range(graph.node_count):
        lines.append(" ".join(f"{v:.6f}" for v in graph.edges[i]))
    return "\n".join(lines) + "\n"


def import_snapshot(path: str) -> ClassGraph:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = [ln.rstrip("\n") for ln in fh]
    except OSError as exc:
        raise IoError(f"cannot read graph snapshot {path!r}: {exc}") from exc
    if not lines or lines[0] != "classgraph v1":
        raise IoError(f"{path!r} is not a class-graph snapshot")
    dim = int(lines[1].split()[1])
    count = int(lines[2].split()[1])
    labels = np.empty(count, dtype=np.int64)
    sessions = np.empty(count, dtype=np.int64)
    features = np.empty((count, dim))
    for i in range(count):
        cells = lines[3 + i].split()
        if cells[0] != "node":
            raise IoError(f"{path!r}: malformed node line {i}")
        labels[i] = int(cells[1])
        sessions[i] = int(cells[2])
        features[i] = [float(c) for c in cells[3 : 3 + dim]]
    if lines[3 + count] != "edges":
        raise IoError(f"{path!r}: missing edges section")
    edges = np.empty((count, count))
    for i in range(count):
        edges[i] = [float(c) for c in lines[4 + count + i].split()]
    return ClassGraph(labels, features, edges, sessions)

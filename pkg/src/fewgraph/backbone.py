"""Feature extractor: a small MLP trained on the base session.

The extractor maps flattened payloads to `output_dim` embeddings and is
trained once with cross-entropy over scaled cosine logits, then frozen for
the rest of the pipeline. Forward/backward are hand-written and checked
against finite differences in the test suite.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import nnops, seeding, serialize
from .errors import DivergedLoss, EmptyClass, IoError, ShapeMismatch
from .protocol import SessionStream

CHECKPOINT_MAGIC = b"FGBBCKP1"
CHECKPOINT_VERSION = 1


@dataclass
class MlpParams:
    """Affine layers with rectifier activations between them (linear output)."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[1]

    def arrays(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out.append((f"w{i}", w))
            out.append((f"b{i}", b))
        return out

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def to_vector(self) -> np.ndarray:
        return serialize.params_to_vector([a for _, a in self.arrays()])

    def load_vector(self, vec: np.ndarray) -> None:
        serialize.assign_from_vector([a for _, a in self.arrays()], vec)


@dataclass
class ClassifierHead:
    """Per-class weight vectors scored by scaled cosine similarity."""

    weights: np.ndarray  # (C, d)
    labels: np.ndarray  # (C,) sorted int64
    scale: float

    def copy(self) -> "ClassifierHead":
        return ClassifierHead(self.weights.copy(), self.labels.copy(), self.scale)

    def target_indices(self, labels: np.ndarray) -> np.ndarray:
        idx = np.searchsorted(self.labels, labels)
        if np.any(idx >= len(self.labels)) or np.any(self.labels[np.minimum(idx, len(self.labels) - 1)] != labels):
            raise EmptyClass("batch contains labels unknown to the classifier head")
        return idx


@dataclass
class PretrainResult:
    params: MlpParams
    head: ClassifierHead
    epoch_losses: list[float] = field(default_factory=list)
    epoch_accuracies: list[float] = field(default_factory=list)


def _fan_in_uniform(rng, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_backbone(input_dim: int, hidden_dim: int, output_dim: int, seed: int) -> MlpParams:
    rng = seeding.derive_rng(seed, seeding.INIT_BACKBONE)
    dims = [input_dim, hidden_dim, output_dim]
    weights, biases = [], []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        weights.append(_fan_in_uniform(rng, d_in, (d_in, d_out)))
        biases.append(_fan_in_uniform(rng, d_in, (d_out,)))
    return MlpParams(weights, biases)


def init_head(labels, dim: int, scale: float, seed: int) -> ClassifierHead:
    rng = seeding.derive_rng(seed, seeding.INIT_HEAD)
    labels = np.array(sorted(int(x) for x in labels), dtype=np.int64)
    return ClassifierHead(_fan_in_uniform(rng, dim, (len(labels), dim)), labels, scale)


def _as_batch(params: MlpParams, inputs) -> np.ndarray:
    if isinstance(inputs, np.ndarray) and inputs.ndim == 2:
        x = inputs.astype(np.float64, copy=False)
    else:
        rows = [np.asarray(p, dtype=np.float64).ravel() for p in inputs]
        if not rows:
            raise ShapeMismatch("empty input batch")
        x = np.stack(rows)
    if x.shape[1] != params.input_dim:
        raise ShapeMismatch(f"inputs have {x.shape[1]} features, extractor expects {params.input_dim}")
    return x


def mlp_forward(params: MlpParams, x: np.ndarray):
    acts = [x]
    h = x
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w + b
        if i < len(params.weights) - 1:
            h = nnops.relu(h)
        acts.append(h)
    return h, acts


def mlp_backward(params: MlpParams, acts, dout: np.ndarray):
    """Returns (dx, grads) with grads ordered like MlpParams.arrays()."""
    grads_w = [None] * len(params.weights)
    grads_b = [None] * len(params.biases)
    dh = dout
    for i in reversed(range(len(params.weights))):
        if i < len(params.weights) - 1:
            dh = dh * (acts[i + 1] > 0)
        grads_w[i] = acts[i].T @ dh
        grads_b[i] = dh.sum(axis=0)
        dh = dh @ params.weights[i].T
    grads = []
    for gw, gb in zip(grads_w, grads_b):
        grads.extend([gw, gb])
    return dh, grads


def extract_features(params: MlpParams, inputs) -> np.ndarray:
    """Embed a batch of payloads; order-preserving and deterministic."""
    x = _as_batch(params, inputs)
    z, _ = mlp_forward(params, x)
    return z


def class_prototype(embeddings: np.ndarray, labels: np.ndarray, target: int) -> np.ndarray:
    """Arithmetic mean of the embeddings carrying `target`."""
    mask = np.asarray(labels) == target
    if not mask.any():
        raise EmptyClass(f"no embedding carries label {target}")
    return np.asarray(embeddings)[mask].mean(axis=0)


def pretrain_loss_and_grads(params: MlpParams, head: ClassifierHead, x: np.ndarray, y: np.ndarray):
    """Base-session objective on one batch.

    Returns (per_sample_losses, backbone grads, head-weight grad).
    """
    z, acts = mlp_forward(params, x)
    targets = head.target_indices(y)
    scores, cache = nnops.cosine_scores(z, head.weights)
    logits = head.scale * scores
    logp = nnops.log_softmax(logits)
    per_sample = -logp[np.arange(len(y)), targets]
    dlogits = np.exp(logp)
    dlogits[np.arange(len(y)), targets] -= 1.0
    dlogits /= len(y)
    dz, dw_head = nnops.cosine_scores_backward(cache, head.scale * dlogits)
    _, grads = mlp_backward(params, acts, dz)
    return per_sample, grads, dw_head


def cosine_annealed(lr0: float, step: int, total: int) -> float:
    if total <= 0:
        return lr0
    return lr0 * 0.5 * (1.0 + np.cos(np.pi * step / total))


def pretrain_base(stream: SessionStream, config) -> PretrainResult:
    """Train extractor + head on the base session with momentum SGD.

    `config` provides embed_dim, backbone_hidden, pretrain_epochs,
    pretrain_lr, pretrain_batch, momentum, scale and seed (see TrainConfig).
    """
    base = stream.sessions[0]
    x_all = base.payload_matrix()
    y_all = base.label_vector()
    params = init_backbone(x_all.shape[1], config.backbone_hidden, config.embed_dim, config.seed)
    head = init_head(base.labels(), config.embed_dim, config.scale, config.seed)

    n = len(y_all)
    epochs = config.pretrain_epochs
    batch = max(1, min(config.pretrain_batch, n))
    steps_total = epochs * ((n + batch - 1) // batch)
    velocities = [np.zeros_like(a) for _, a in params.arrays()]
    vel_head = np.zeros_like(head.weights)
    rng = seeding.derive_rng(config.seed, seeding.PRETRAIN)

    result = PretrainResult(params, head)
    step = 0
    for _ in range(epochs):
        order = rng.permutation(n)
        sample_losses = np.empty(n)
        for lo in range(0, n, batch):
            sel = order[lo : lo + batch]
            per_sample, grads, dw_head = pretrain_loss_and_grads(params, head, x_all[sel], y_all[sel])
            if not np.all(np.isfinite(per_sample)):
                raise DivergedLoss("base-session cross-entropy became non-finite")
            sample_losses[sel] = per_sample
            lr = cosine_annealed(config.pretrain_lr, step, steps_total)
            arrays = [a for _, a in params.arrays()]
            for arr, vel, g in zip(arrays, velocities, grads):
                vel *= config.momentum
                vel -= lr * g
                arr += vel
            vel_head *= config.momentum
            vel_head -= lr * dw_head
            head.weights += vel_head
            step += 1
        result.epoch_losses.append(float(sample_losses.mean()))
        z = extract_features(params, x_all)
        pred = head.labels[np.argmax(z @ head.weights.T / np.linalg.norm(head.weights, axis=1), axis=1)]
        result.epoch_accuracies.append(float((pred == y_all).mean()))
    return result


def save_backbone_checkpoint(params: MlpParams, path: str) -> None:
    """Versioned header + little-endian float64 parameters; bit-exact."""
    try:
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<II", CHECKPOINT_VERSION, params.output_dim))
            serialize.write_array_block(fh, dict(params.arrays()))
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path!r}: {exc}") from exc


def load_backbone_checkpoint(path: str) -> MlpParams:
    try:
        with open(path, "rb") as fh:
            magic = fh.read(len(CHECKPOINT_MAGIC))
            if magic != CHECKPOINT_MAGIC:
                raise IoError(f"{path!r} is not a backbone checkpoint")
            version, output_dim = struct.unpack("<II", fh.read(8))
            if version != CHECKPOINT_VERSION:
                raise IoError(f"unsupported checkpoint version {version}")
            named = serialize.read_array_block(fh)
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path!r}: {exc}") from exc
    weights, biases = [], []
    for i in range(len(named) // 2):
        weights.append(named[f"w{i}"])
        biases.append(named[f"b{i}"])
    params = MlpParams(weights, biases)
    if params.output_dim != output_dim:
        raise IoError("checkpoint header output_dim disagrees with layer manifest")
    return params

"""Experiment runner: methods, baselines, metrics, and result files.

Accuracies are stored as fractions in [0, 1] and rendered as percentages
with two decimals in tables. The drop metric is base-session accuracy
minus final-session accuracy (lower is better).
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import seeding
from .backbone import class_prototype, extract_features, mlp_backward, mlp_forward
from .class_graph import CalibratedClassFeature, ClassGraph, insert_calibrated, predict
from .datasets import (
    LabeledDataset,
    load_directory_dataset,
    load_feature_csv,
    load_feature_npz,
    make_synthetic_reference,
)
from .errors import ConfigError, DivergedLoss, IoError, UnknownLabel
from .protocol import ProtocolConfig, SessionStream, build_session_stream
from .trainer import (
    ModelState,
    TrainConfig,
    _Adam,
    embed_batch,
    save_state,
    stage1_pre_construct,
    stage2_meta_train,
    stage3_incremental,
    write_loss_log,
)

METHODS = (
    "s2c",
    "baseline_finetune",
    "baseline_decoupled_cosine",
    "ablation_sgn_only",
    "ablation_cgn_only",
)

RESULT_FORMATS = ("table-text", "csv", "json-lines")


@dataclass
class SessionReport:
    method: str
    seed: int
    accuracies: list[float]
    pd: float = field(init=False)
    config_fingerprint: str = ""
    wall_clock: list[float] = field(default_factory=list)

    def __post_init__(self):
        if not self.accuracies:
            raise ConfigError("a session report needs at least one accuracy")
        for a in self.accuracies:
            if not 0.0 <= a <= 1.0:
                raise ConfigError(f"accuracy {a} outside [0, 1]")
        self.pd = self.accuracies[0] - self.accuracies[-1]


def performance_dropping(report: SessionReport) -> float:
    """Base-session accuracy minus last-session accuracy."""
    return report.accuracies[0] - report.accuracies[-1]


@dataclass(frozen=True)
class SyntheticSpec:
    class_count: int = 20
    dim: int = 16
    radius: float = 4.0
    train_per_class: int = 200
    test_per_class: int = 50


@dataclass(frozen=True)
class ExperimentConfig:
    method: str = "s2c"
    protocol: ProtocolConfig = ProtocolConfig(
        base_class_count=12, n_way=2, k_shot=5, query_per_class=15, session_count=4, seed=0
    )
    train: TrainConfig = TrainConfig()
    dataset_source: str = "synthetic"
    test_dataset_source: str = ""
    synthetic: SyntheticSpec = SyntheticSpec()
    repeat: int = 1
    out_dir: str = ""

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.repeat < 1:
            raise ConfigError("repeat must be >= 1")
        self.protocol.validate()
        self.train.validate()

    def fingerprint(self) -> str:
        blob = json.dumps(
            {
                "method": self.method,
                "protocol": vars(self.protocol),
                "train": {k: v for k, v in vars(self.train).items()},
                "dataset": self.dataset_source,
                "test_dataset": self.test_dataset_source,
                "synthetic": vars(self.synthetic),
            },
            sort_keys=True,
            default=str,
        )
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]


def load_datasets(config: ExperimentConfig, seed: int):
    """Resolve the configured dataset source into (train, test-or-None)."""
    source = config.dataset_source
    if source == "synthetic":
        spec = config.synthetic
        return make_synthetic_reference(
            class_count=spec.class_count,
            dim=spec.dim,
            radius=spec.radius,
            train_per_class=spec.train_per_class,
            test_per_class=spec.test_per_class,
            seed=seed,
        )
    train = _load_path(source)
    test = _load_path(config.test_dataset_source) if config.test_dataset_source else None
    return train, test


def _load_path(path: str) -> LabeledDataset:
    if path.endswith(".csv"):
        return load_feature_csv(path)
    if path.endswith(".npz"):
        return load_feature_npz(path)
    return load_directory_dataset(path)


def evaluate_session(state: ModelState, test_set: LabeledDataset,
                     graph: ClassGraph | None = None) -> float:
    """Top-1 accuracy of nearest-cosine-node prediction over a test set."""
    g = graph if graph is not None else state.graph
    missing = set(test_set.labels()) - g.label_set()
    if missing:
        raise UnknownLabel(f"test labels without a graph node: {sorted(missing)}")
    z = extract_features(state.backbone, test_set.payload_matrix())
    y = test_set.label_vector()
    correct = 0
    for i in range(len(y)):
        label, _ = predict(g, z[i])
        correct += int(label == y[i])
    return correct / len(y)


def _graph_method_config(method: str, train_cfg: TrainConfig) -> TrainConfig:
    if method == "s2c":
        return train_cfg
    if method == "ablation_sgn_only":
        return replace(train_cfg, use_calibration=False)
    if method == "ablation_cgn_only":
        return replace(train_cfg, use_refinement=False, clamp_edges=True)
    if method == "baseline_decoupled_cosine":
        return replace(train_cfg, use_refinement=False, use_calibration=False, clamp_edges=True)
    raise ConfigError(f"not a graph method: {method!r}")


def run_graph_method(method: str, stream: SessionStream, train_cfg: TrainConfig,
                     out_prefix: str | None = None):
    """Stages 1-3 for s2c/ablations; per-session accuracies on cumulative tests.

    With `out_prefix`, a bit-exact model-state checkpoint is written at every
    stage boundary plus the stage-2 loss trace.
    """
    cfg = _graph_method_config(method, train_cfg)
    clocks = []
    t0 = time.perf_counter()
    state = stage1_pre_construct(stream, cfg)
    if out_prefix:
        save_state(state, f"{out_prefix}.stage1.state")
    trains_anything = cfg.use_refinement or cfg.use_calibration
    if trains_anything:
        state, records = stage2_meta_train(state, stream, cfg)
    else:
        state, records = replace(state, stage=2), []
    if out_prefix:
        save_state(state, f"{out_prefix}.stage2.state")
        if records:
            write_loss_log(records, f"{out_prefix}.losses")
    clocks.append(time.perf_counter() - t0)
    accs = [evaluate_session(state, stream.test_sets[0], graph=state.graph)]
    t0 = time.perf_counter()
    state, snapshots = stage3_incremental(state, stream, cfg)
    for t, snap in enumerate(snapshots, start=1):
        accs.append(evaluate_session(state, stream.test_sets[t], graph=snap))
        clocks.append(time.perf_counter() - t0)
        t0 = time.perf_counter()
    if out_prefix:
        save_state(state, f"{out_prefix}.stage3.state")
    return accs, clocks, state, records


def baseline_decoupled_cosine(state: ModelState, stream: SessionStream, normalize: bool = True):
    """Frozen extractor; each new class node is the raw few-shot prototype."""
    graph = state.graph
    accs = [evaluate_session(state, stream.test_sets[0], graph=graph)]
    clocks = [0.0]
    for t in range(1, len(stream.sessions)):
        t0 = time.perf_counter()
        session = stream.sessions[t]
        z = embed_batch(state.backbone, session.payload_matrix(), normalize)
        y = session.label_vector()
        protos = [
            CalibratedClassFeature(int(c), class_prototype(z, y, int(c)))
            for c in sorted(set(int(v) for v in y))
        ]
        graph = insert_calibrated(graph, protos, session=t)
        accs.append(evaluate_session(state, stream.test_sets[t], graph=graph))
        clocks.append(time.perf_counter() - t0)
    return accs, clocks, graph


def _fit_linear_head(z: np.ndarray, y: np.ndarray, labels, steps: int = 200, lr: float = 0.05):
    """Full-batch softmax regression on frozen embeddings (session-0 head)."""
    labs = np.array(sorted(labels), dtype=np.int64)
    w = np.zeros((len(labs), z.shape[1]))
    b = np.zeros(len(labs))
    targets = np.searchsorted(labs, y)
    opt = _Adam([w, b], lr)
    for _ in range(steps):
        logits = z @ w.T + b
        logp = logits - logits.max(axis=1, keepdims=True)
        logp = logp - np.log(np.exp(logp).sum(axis=1, keepdims=True))
        dlogits = np.exp(logp)
        dlogits[np.arange(len(y)), targets] -= 1.0
        dlogits /= len(y)
        opt.step([dlogits.T @ z, dlogits.sum(axis=0)])
    return w, b


def baseline_finetune(state: ModelState, stream: SessionStream, train_cfg: TrainConfig,
                      steps_per_session: int = 100, lr: float = 0.01):
    """Fine-tune extractor + linear head on each session's few-shot data only.

    Base head rows start at the class prototypes; rows for unseen classes
    start near zero, so with zero steps new classes stay near chance while
    base accuracy persists. Training uses plain cross-entropy on the support
    set, which is the classic catastrophic-forgetting baseline.
    """
    backbone = state.backbone.copy()
    base = stream.sessions[0]
    z0 = extract_features(backbone, base.payload_matrix())
    y0 = base.label_vector()
    seen_labels = sorted(int(c) for c in stream.label_spaces[0])
    w0, b0 = _fit_linear_head(z0, y0, seen_labels)
    weights = {c: w0[i] for i, c in enumerate(seen_labels)}
    bias = {c: float(b0[i]) for i, c in enumerate(seen_labels)}
    rng = seeding.derive_rng(train_cfg.seed, seeding.FINETUNE)

    def head_matrices():
        labs = np.array(sorted(weights), dtype=np.int64)
        w = np.stack([weights[int(c)] for c in labs])
        b = np.array([bias[int(c)] for c in labs])
        return labs, w, b

    def session_accuracy(test_set):
        labs, w, b = head_matrices()
        z = extract_features(backbone, test_set.payload_matrix())
        logits = z @ w.T + b
        pred = labs[np.argmax(logits, axis=1)]
        return float((pred == test_set.label_vector()).mean())

    accs = [session_accuracy(stream.test_sets[0])]
    clocks = [0.0]
    for t in range(1, len(stream.sessions)):
        t0 = time.perf_counter()
        session = stream.sessions[t]
        for c in stream.label_spaces[t]:
            weights[int(c)] = 1e-3 * rng.standard_normal(train_cfg.embed_dim)
            bias[int(c)] = 0.0
        x = session.payload_matrix()
        y = session.label_vector()
        labs, w, b = head_matrices()
        vel_w = np.zeros_like(w)
        vel_b = np.zeros_like(b)
        bb_arrays = [a for _, a in backbone.arrays()]
        vel_bb = [np.zeros_like(a) for a in bb_arrays]
        targets = np.searchsorted(labs, y)
        for step in range(steps_per_session):
            z, acts = mlp_forward(backbone, x)
            logits = z @ w.T + b
            shifted = logits - logits.max(axis=1, keepdims=True)
            logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
            loss = -logp[np.arange(len(y)), targets].mean()
            if not np.isfinite(loss):
                raise DivergedLoss(f"fine-tune baseline diverged in session {t}")
            dlogits = np.exp(logp)
            dlogits[np.arange(len(y)), targets] -= 1.0
            dlogits /= len(y)
            dz = dlogits @ w
            dw = dlogits.T @ z
            db = dlogits.sum(axis=0)
            _, grads = mlp_backward(backbone, acts, dz)
            for arr, vel, g in zip(bb_arrays, vel_bb, grads):
                vel *= train_cfg.momentum
                vel -= lr * g
                arr += vel
            vel_w *= train_cfg.momentum
            vel_w -= lr * dw
            w += vel_w
            vel_b *= train_cfg.momentum
            vel_b -= lr * db
            b += vel_b
        for i, c in enumerate(labs):
            weights[int(c)] = w[i]
            bias[int(c)] = float(b[i])
        accs.append(session_accuracy(stream.test_sets[t]))
        clocks.append(time.perf_counter() - t0)
    return accs, clocks


def run_experiment(config: ExperimentConfig):
    """Run the configured method over `repeat` seeds.

    Returns (reports, summary) where summary holds per-session mean/std and
    the mean/std of the drop metric across repeats.
    """
    config.validate()
    fingerprint = config.fingerprint()
    reports: list[SessionReport] = []
    for r in range(config.repeat):
        seed = config.protocol.seed + r
        reports.append(_run_single(config, seed, fingerprint))
    acc = np.array([rep.accuracies for rep in reports])
    pds = np.array([rep.pd for rep in reports])
    ddof = 1 if len(reports) > 1 else 0
    summary = {
        "method": config.method,
        "repeats": config.repeat,
        "mean_accuracies": acc.mean(axis=0).tolist(),
        "std_accuracies": acc.std(axis=0, ddof=ddof).tolist(),
        "mean_pd": float(pds.mean()),
        "std_pd": float(pds.std(ddof=ddof)),
    }
    return reports, summary


def _run_single(config: ExperimentConfig, seed: int, fingerprint: str) -> SessionReport:
    train_ds, test_ds = load_datasets(config, seed)
    protocol = replace(config.protocol, seed=seed)
    train_cfg = replace(config.train, seed=seed)
    stream = build_session_stream(train_ds, protocol, test_dataset=test_ds)
    if config.method == "baseline_finetune":
        state = stage1_pre_construct(stream, train_cfg)
        accs, clocks = baseline_finetune(state, stream, train_cfg)
    elif config.method == "baseline_decoupled_cosine":
        state = stage1_pre_construct(
            stream, replace(train_cfg, use_refinement=False, use_calibration=False, clamp_edges=True)
        )
        accs, clocks, _ = baseline_decoupled_cosine(state, stream, normalize=train_cfg.normalize_features)
    else:
        out_prefix = None
        if config.out_dir:
            os.makedirs(config.out_dir, exist_ok=True)
            out_prefix = os.path.join(config.out_dir, f"{config.method}_seed{seed}")
        accs, clocks, _, _ = run_graph_method(config.method, stream, train_cfg, out_prefix)
    return SessionReport(
        method=config.method,
        seed=seed,
        accuracies=accs,
        config_fingerprint=fingerprint,
        wall_clock=clocks,
    )


def emit_results(reports: list[SessionReport], fmt: str, path: str) -> None:
    """Write reports as csv / json-lines / paper-style text table.

    csv and json-lines round-trip at 4-decimal precision; emitted bytes are
    identical across reruns of the same config + seed.
    """
    if not reports:
        raise ConfigError("no reports to emit")
    if fmt not in RESULT_FORMATS:
        raise ConfigError(f"format must be one of {RESULT_FORMATS}")
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(render_results(reports, fmt))
    except OSError as exc:
        raise IoError(f"cannot write results {path!r}: {exc}") from exc


def render_results(reports: list[SessionReport], fmt: str) -> str:
    sessions = len(reports[0].accuracies)
    if any(len(r.accuracies) != sessions for r in reports):
        raise ConfigError("all reports must cover the same number of sessions")
    if fmt == "csv":
        header = "method,seed," + ",".join(f"A{i}" for i in range(sessions)) + ",PD"
        lines = [header]
        for r in reports:
            stored = [round(a, 4) for a in r.accuracies]
            cells = [r.method, str(r.seed)]
            cells += [f"{a:.4f}" for a in stored]
            # keep the stored PD identical to the stored accuracies
            cells.append(f"{stored[0] - stored[-1]:.4f}")
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"
    if fmt == "json-lines":
        lines = []
        for r in reports:
            stored = [round(a, 4) for a in r.accuracies]
            lines.append(json.dumps({
                "method": r.method,
                "seed": r.seed,
                "accuracies": stored,
                "pd": stored[0] - stored[-1],
                "config_fingerprint": r.config_fingerprint,
            }, sort_keys=True))
        return "\n".join(lines) + "\n"
    # table-text: one row per report, session accuracies as percentages + PD
    name_w = max(len("method"), max(len(r.method) for r in reports)) + 2
    header = "method".ljust(name_w) + "seed" + "".join(f"{i:>8}" for i in range(sessions)) + f"{'PD':>8}"
    lines = [header]
    for r in reports:
        row = r.method.ljust(name_w) + f"{r.seed:>4}"
        row += "".join(f"{100 * a:>8.2f}" for a in r.accuracies)
        row += f"{100 * r.pd:>8.2f}"
        lines.append(row)
    return "\n".join(lines) + "\n"


def read_results_csv(path: str) -> list[SessionReport]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            rows = [ln.strip() for ln in fh if ln.strip()]
    except OSError as exc:
        raise IoError(f"cannot read results {path!r}: {exc}") from exc
    header = rows[0].split(",")
    if header[:2] != ["method", "seed"] or header[-1] != "PD":
        raise IoError(f"{path!r}: not a results csv")
    out = []
    for row in rows[1:]:
        cells = row.split(",")
        accs = [float(c) for c in cells[2:-1]]
        out.append(SessionReport(method=cells[0], seed=int(cells[1]), accuracies=accs))
    return out


def read_results_jsonl(path: str) -> list[SessionReport]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            rows = [json.loads(ln) for ln in fh if ln.strip()]
    except OSError as exc:
        raise IoError(f"cannot read results {path!r}: {exc}") from exc
    return [
        SessionReport(
            method=r["method"], seed=int(r["seed"]), accuracies=[float(a) for a in r["accuracies"]],
            config_fingerprint=r.get("config_fingerprint", ""),
        )
        for r in rows
    ]

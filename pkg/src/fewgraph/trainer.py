"""Three-stage training pipeline.

Stage 1 pretrains the extractor on the base session and builds the base
class graph from prototypes. Stage 2 meta-trains the edge encoder and the
attention calibration on pseudo-incremental tasks drawn from base
embeddings, with mixup-built virtual classes, under the joint objective
`L = L_triplet + alpha * L_cosine_ce`. Stage 3 walks the real incremental
sessions, refining + calibrating each support set and growing the graph;
the extractor stays frozen after stage 1.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import nnops, seeding, serialize
from .backbone import (
    ClassifierHead,
    MlpParams,
    class_prototype,
    extract_features,
    pretrain_base,
)
from .class_graph import (
    AttentionParams,
    CalibratedClassFeature,
    ClassGraph,
    build_base_graph,
    calibrate_backward,
    calibrate_forward,
    init_attention,
    insert_calibrated,
)
from .datasets import LabeledDataset
from .errors import (
    ConfigError,
    DimensionMismatch,
    DivergedLoss,
    InsufficientClasses,
    IoError,
    LabelCollision,
)
from .protocol import Episode, SessionStream
from .sample_graph import (
    EdgeEncoderParams,
    TripletConfig,
    init_edge_encoder,
    refine_backward,
    refine_forward,
    triplet_loss_and_grad,
)

STATE_MAGIC = b"FGSTATE1"
STATE_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    # joint objective
    alpha: float = 1.0
    margin: float = 0.5
    mining: str = "batch-hard"
    scale: float = 16.0
    # mixup coefficients are drawn from Beta(mixup_a, mixup_b)
    mixup_a: float = 2.0
    mixup_b: float = 2.0
    # pseudo-incremental meta-training
    pseudo_task_count: int = 2
    meta_iterations: int = 200
    meta_lr: float = 0.01
    pseudo_way: int | None = None
    pseudo_shot: int | None = None
    pseudo_query: int | None = None
    # stage 1
    pretrain_epochs: int = 40
    pretrain_lr: float = 0.05
    pretrain_batch: int = 32
    momentum: float = 0.9
    embed_dim: int = 16
    backbone_hidden: int = 64
    # graph components
    sgn_rounds: int = 2
    edge_hidden: int = 32
    head_count: int = 1
    attention_normalize: bool = True
    # decay toward zero for the attention projections; mainly useful with
    # the unnormalized gate, where zero weights mean no calibration
    attention_decay: float = 0.1
    # after meta-training, keep each graph module only if it beats its
    # no-op replacement on held-out pseudo-sessions
    validate_modules: bool = True
    validation_tasks: int = 20
    use_refinement: bool = True
    use_calibration: bool = True
    clamp_edges: bool = False
    # unit-normalize frozen-extractor features before any graph op; cosine
    # prediction is scale-invariant, and bounded norms keep the triplet and
    # aggregation terms well-scaled
    normalize_features: bool = True
    # stage 3 (optional per-session fine-tune; off by default)
    stage3_finetune: bool = False
    stage3_iterations: int = 100
    stage3_lr: float = 0.01
    seed: int = 0

    def validate(self) -> None:
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if self.margin < 0:
            raise ConfigError("margin must be >= 0")
        if self.mixup_a <= 0 or self.mixup_b <= 0:
            raise ConfigError("mixup beta parameters must be > 0")
        for name in ("pseudo_task_count", "meta_iterations", "pretrain_epochs",
                     "pretrain_batch", "sgn_rounds", "edge_hidden", "head_count",
                     "embed_dim", "backbone_hidden", "stage3_iterations"):
            if getattr(self, name) < (0 if name in ("meta_iterations", "pretrain_epochs") else 1):
                raise ConfigError(f"{name} must be positive")
        if self.scale <= 0:
            raise ConfigError("scale must be > 0")
        TripletConfig(self.margin, self.mining).validate()

    def pseudo_shape(self, protocol) -> tuple[int, int, int]:
        way = self.pseudo_way if self.pseudo_way is not None else protocol.n_way
        shot = self.pseudo_shot if self.pseudo_shot is not None else protocol.k_shot
        query = self.pseudo_query if self.pseudo_query is not None else protocol.query_per_class
        return way, shot, query


@dataclass
class MixCoefficient:
    lam: float

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"mix coefficient {self.lam} outside [0, 1]")


def draw_mix_coefficient(rng, a: float, b: float) -> MixCoefficient:
    return MixCoefficient(float(rng.beta(a, b)))


@dataclass
class VirtualClass:
    """A mixup-built class used only inside one meta-iteration."""

    label: int
    support: np.ndarray
    query: np.ndarray
    lam: float
    sources: tuple[int, int]  # episode indices
    source_labels: tuple[int, int]  # real class labels that were mixed


@dataclass
class ModelState:
    backbone: MlpParams
    head: ClassifierHead
    edge: EdgeEncoderParams
    attention: AttentionParams
    graph: ClassGraph
    stage: int
    base_loss_curve: list[float] = field(default_factory=list)
    # set by the stage-2 validation gate: a trained module is deployed only
    # if it beat its no-op replacement on held-out pseudo-sessions
    refinement_active: bool = True
    calibration_active: bool = True


@dataclass
class MetaIterationRecord:
    iteration: int
    sgn_loss: float
    cgn_loss: float
    total: float


def total_loss(l_sgn: float, l_cgn: float, alpha: float) -> float:
    """Joint objective: sample-level loss plus `alpha` times class-level loss."""
    return l_sgn + alpha * l_cgn


def manifold_mixup(z1: np.ndarray, z2: np.ndarray, lam: MixCoefficient | float) -> np.ndarray:
    """Elementwise convex combination lam*z1 + (1-lam)*z2."""
    z1 = np.asarray(z1, dtype=np.float64)
    z2 = np.asarray(z2, dtype=np.float64)
    if z1.shape != z2.shape:
        raise DimensionMismatch(f"mixup shapes differ: {z1.shape} vs {z2.shape}")
    lam_value = lam.lam if isinstance(lam, MixCoefficient) else float(lam)
    return lam_value * z1 + (1.0 - lam_value) * z2


def embed_batch(params: MlpParams, inputs, normalize: bool) -> np.ndarray:
    """Frozen-extractor features, optionally projected to the unit sphere."""
    z = extract_features(params, inputs)
    if normalize:
        norms = np.linalg.norm(z, axis=1, keepdims=True)
        z = z / np.maximum(norms, 1e-12)
    return z


def embed_dataset(params: MlpParams, dataset: LabeledDataset, normalize: bool) -> LabeledDataset:
    """Dataset whose payloads are embeddings under the (frozen) extractor."""
    z = embed_batch(params, dataset.payload_matrix(), normalize)
    y = dataset.label_vector()
    return LabeledDataset([(z[i], int(y[i])) for i in range(len(y))])


def stage1_pre_construct(stream: SessionStream, config: TrainConfig) -> ModelState:
    """Pretrain the extractor, build the base prototype graph, freeze."""
    config.validate()
    result = pretrain_base(stream, config)
    base = stream.sessions[0]
    z = embed_batch(result.params, base.payload_matrix(), config.normalize_features)
    y = base.label_vector()
    prototypes = [(label, class_prototype(z, y, label)) for label in base.labels()]
    graph = build_base_graph(prototypes)
    edge = init_edge_encoder(config.embed_dim, config.edge_hidden, config.seed,
                             clamp_zero=config.clamp_edges)
    if config.attention_normalize:
        # identity-dominant start keeps softmax attention near the new
        # feature itself
        attention = init_attention(config.embed_dim, config.seed, config.head_count,
                                   normalize=True, identity=2.0, noise=0.3)
    else:
        # raw gate starts near zero so calibration begins as an exact no-op
        attention = init_attention(config.embed_dim, config.seed, config.head_count,
                                   normalize=False, identity=0.0, noise=0.05)
    return ModelState(
        backbone=result.params,
        head=result.head,
        edge=edge,
        attention=attention,
        graph=graph,
        stage=1,
        base_loss_curve=list(result.epoch_losses),
    )


def sample_pseudo_task(base_embeddings: LabeledDataset, config: TrainConfig, seed: int,
                       way: int, shot: int, query_per_class: int):
    """Label-disjoint pseudo episodes plus mixup virtual classes.

    Episodes are paired round-robin; each pair yields one virtual class of
    `shot` support and `query_per_class` query samples, mixing index-aligned
    samples with a single coefficient per class. Virtual labels start just
    above the largest real label. With a single episode no virtual class is
    built (it would mix an episode with itself).
    """
    n_tasks = config.pseudo_task_count
    classes = list(base_embeddings.labels())
    if len(classes) < n_tasks * way:
        raise InsufficientClasses(
            f"pseudo tasks need {n_tasks * way} classes, base has {len(classes)}"
        )
    rng = seeding.derive_rng(seed, seeding.PSEUDO_TASK)
    order = [classes[i] for i in rng.permutation(len(classes))]
    episodes: list[Episode] = []
    for t in range(n_tasks):
        chosen = order[t * way : (t + 1) * way]
        support, query = [], []
        for label in chosen:
            idx = base_embeddings.indices_of(label)
            if len(idx) < shot + query_per_class:
                raise InsufficientClasses(
                    f"base class {label} has {len(idx)} embeddings, needs {shot + query_per_class}"
                )
            perm = rng.permutation(len(idx))
            support.extend(base_embeddings.samples[idx[p]] for p in perm[:shot])
            query.extend(base_embeddings.samples[idx[p]] for p in perm[shot : shot + query_per_class])
        episodes.append(Episode(support=support, query=query, way=way, shot=shot))

    # round-robin pairing, one virtual class per unordered episode pair
    # (with two episodes, (0,1) and (1,0) would mint two mixes of the same
    # class pair that systematically confuse each other)
    virtuals: list[VirtualClass] = []
    if n_tasks >= 2:
        fresh = max(classes) + 1
        seen_pairs: set[frozenset[int]] = set()
        for t in range(n_tasks):
            partner = (t + 1) % n_tasks
            key = frozenset((t, partner))
            if key in seen_pairs:
                continue
            seen_pairs.add(key)
            lam = draw_mix_coefficient(rng, config.mixup_a, config.mixup_b)
            s1, _ = episodes[t].support_arrays()
            s2, _ = episodes[partner].support_arrays()
            q1, _ = episodes[t].query_arrays()
            q2, _ = episodes[partner].query_arrays()
            virtuals.append(VirtualClass(
                label=fresh + len(virtuals),
                support=manifold_mixup(s1[:shot], s2[:shot], lam),
                query=manifold_mixup(q1[:query_per_class], q2[:query_per_class], lam),
                lam=lam.lam,
                sources=(t, partner),
                source_labels=(int(episodes[t].support[0][1]), int(episodes[partner].support[0][1])),
            ))
    return episodes, virtuals


class _Adam:
    """Adam with decoupled weight decay, updating arrays in place.

    The edge encoder and the attention projections see gradients that differ
    by orders of magnitude; per-coordinate normalization trains both with a
    single learning rate. Decay (where requested) shrinks parameters toward
    zero, which for the calibration gate is the do-no-harm configuration.
    """

    def __init__(self, arrays, lr: float, weight_decay: float = 0.0,
                 b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.arrays = arrays
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2, self.eps = b1, b2, eps
        self.m = [np.zeros_like(a) for a in arrays]
        self.v = [np.zeros_like(a) for a in arrays]
        self.t = 0

    def step(self, grads, lr_scale: float = 1.0) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for arr, m, v, g in zip(self.arrays, self.m, self.v, grads):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            step = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                step = step + self.weight_decay * arr
            arr -= (self.lr * lr_scale) * step


def _episode_losses(edge: EdgeEncoderParams, attention: AttentionParams,
                    graph: ClassGraph, episode: Episode, virtual: VirtualClass | None,
                    config: TrainConfig):
    """Forward + backward for one pseudo session.

    Returns (sgn_loss, cgn_loss, edge_grads, attn_grads). The episode's
    source classes play the role of new classes, so their base nodes are
    removed from the old-class context; queries are then scored over the
    remaining old nodes plus this session's calibrated classes, which keeps
    old/new distinction in the loss.
    """
    s_z, s_y = episode.support_arrays()
    q_z, q_y = episode.query_arrays()
    playing_new = {int(c) for c in episode.labels()}
    if virtual is not None:
        playing_new.update(virtual.source_labels)
        v_sup_y = np.full(len(virtual.support), virtual.label, dtype=np.int64)
        s_z = np.vstack([s_z, virtual.support])
        s_y = np.concatenate([s_y, v_sup_y])
        if len(virtual.query):
            q_z = np.vstack([q_z, virtual.query])
            q_y = np.concatenate([q_y, np.full(len(virtual.query), virtual.label, dtype=np.int64)])

    sgn_loss, _ = triplet_loss_and_grad(s_z, s_y, TripletConfig(config.margin, config.mining))

    if config.use_refinement:
        feats, class_order, r_cache = refine_forward(edge, s_z, s_y, config.sgn_rounds)
    else:
        class_order = np.unique(s_y)
        feats = np.stack([s_z[s_y == c].mean(axis=0) for c in class_order])
        r_cache = None

    keep = ~np.isin(graph.labels, sorted(playing_new))
    context = graph.features[keep]
    if config.use_calibration:
        # the gate's coefficients are quadratic in feature norm, so it only
        # sees unit-normalized class features
        fhat, fnorms = nnops.unit_rows(feats)
        calibrated, c_cache = calibrate_forward(context, fhat, attention)
    else:
        fhat, fnorms, c_cache = None, None, None
        calibrated = feats

    # queries compete against the remaining old classes too
    refs = np.vstack([context, calibrated])
    targets = len(context) + np.searchsorted(class_order, q_y)
    cls_loss, _, d_refs = nnops.cosine_ce(q_z, targets, refs, config.scale)
    d_feats_out = d_refs[len(context):]

    edge_grads = edge.zero_grads()
    attn_grads = attention.zero_grads()
    if c_cache is not None:
        d_fhat, dw_key, dw_query = calibrate_backward(attention, c_cache, d_feats_out)
        attn_grads[0] += dw_key
        attn_grads[1] += dw_query
        d_feats = nnops.unit_rows_backward(fhat, fnorms, d_fhat)
    else:
        d_feats = d_feats_out
    if r_cache is not None and not edge.clamp_zero:
        _, e_grads = refine_backward(edge, r_cache, d_feats)
        for acc, g in zip(edge_grads, e_grads):
            acc += g
    return float(sgn_loss), float(cls_loss), edge_grads, attn_grads


def _pseudo_accuracy(base_embeddings: LabeledDataset, graph: ClassGraph, config: TrainConfig,
                     way: int, shot: int, query: int, seed: int, task_count: int,
                     edge: EdgeEncoderParams | None, attention: AttentionParams | None) -> float:
    """Query accuracy over held-out pseudo-sessions for a module combo.

    `edge=None` means plain class means; `attention=None` skips calibration.
    Queries are scored over the surviving old nodes plus the session's class
    features, like the training loss.
    """
    correct = 0
    seen = 0
    for t in range(task_count):
        episodes, _ = sample_pseudo_task(
            base_embeddings, config,
            seed=seeding.derive_rng(seed, seeding.META, 10_000 + t).integers(2**31),
            way=way, shot=shot, query_per_class=query,
        )
        for episode in episodes:
            s_z, s_y = episode.support_arrays()
            q_z, q_y = episode.query_arrays()
            if not len(q_y):
                continue
            if edge is not None:
                feats, order, _ = refine_forward(edge, s_z, s_y, config.sgn_rounds)
            else:
                order = np.unique(s_y)
                feats = np.stack([s_z[s_y == c].mean(axis=0) for c in order])
            keep = ~np.isin(graph.labels, order)
            context = graph.features[keep]
            if attention is not None:
                fhat, _ = nnops.unit_rows(feats)
                feats, _ = calibrate_forward(context, fhat, attention)
            refs = np.vstack([context, feats])
            ref_labels = np.concatenate([graph.labels[keep], order])
            scores, _ = nnops.cosine_scores(q_z, refs)
            pred = ref_labels[np.argmax(scores, axis=1)]
            correct += int((pred == q_y).sum())
            seen += len(q_y)
    return correct / max(1, seen)


def _virtual_session_accuracy(base_embeddings: LabeledDataset, graph: ClassGraph,
                              config: TrainConfig, way: int, shot: int, query: int,
                              seed: int, task_count: int,
                              edge: EdgeEncoderParams | None,
                              attention: AttentionParams | None) -> float:
    """Query accuracy on sessions made of mixup-built virtual classes.

    Virtual class directions are unlike any single base class, so this
    probes how a module behaves on the unseen-class directions it will meet
    after deployment; real-class pseudo-sessions cannot measure that.
    """
    classes = list(base_embeddings.labels())
    if len(classes) < 2 * way:
        return _pseudo_accuracy(base_embeddings, graph, config, way, shot, query,
                                seed, task_count, edge, attention)
    fresh = max(classes) + 1
    correct = 0
    seen = 0
    for t in range(task_count):
        rng = seeding.derive_rng(seed, seeding.META, 50_000 + t)
        order = [classes[i] for i in rng.permutation(len(classes))[: 2 * way]]
        sup_list, sup_labels, q_list, q_labels = [], [], [], []
        ok = True
        for v in range(way):
            pair = (order[2 * v], order[2 * v + 1])
            lam = draw_mix_coefficient(rng, config.mixup_a, config.mixup_b)
            parts = []
            for label in pair:
                idx = base_embeddings.indices_of(label)
                if len(idx) < shot + query:
                    ok = False
                    break
                perm = rng.permutation(len(idx))
                rows = [base_embeddings.samples[idx[p]][0] for p in perm[: shot + query]]
                parts.append(np.stack(rows))
            if not ok:
                break
            mixed = manifold_mixup(parts[0], parts[1], lam)
            sup_list.append(mixed[:shot])
            sup_labels.extend([fresh + v] * shot)
            q_list.append(mixed[shot:])
            q_labels.extend([fresh + v] * query)
        if not ok or not q_labels:
            continue
        s_z = np.vstack(sup_list)
        s_y = np.array(sup_labels, dtype=np.int64)
        q_z = np.vstack(q_list)
        q_y = np.array(q_labels, dtype=np.int64)
        if edge is not None:
            feats, order_v, _ = refine_forward(edge, s_z, s_y, config.sgn_rounds)
        else:
            order_v = np.unique(s_y)
            feats = np.stack([s_z[s_y == c].mean(axis=0) for c in order_v])
        if attention is not None:
            fhat, _ = nnops.unit_rows(feats)
            feats, _ = calibrate_forward(graph.features, fhat, attention)
        refs = np.vstack([graph.features, feats])
        ref_labels = np.concatenate([graph.labels, order_v])
        scores, _ = nnops.cosine_scores(q_z, refs)
        pred = ref_labels[np.argmax(scores, axis=1)]
        correct += int((pred == q_y).sum())
        seen += len(q_y)
    return correct / max(1, seen)


def _select_modules(base_embeddings: LabeledDataset, graph: ClassGraph, config: TrainConfig,
                    way: int, shot: int, query: int,
                    edge: EdgeEncoderParams, attention: AttentionParams) -> tuple[bool, bool]:
    """Keep each trained module only if it beats its no-op replacement.

    Refinement acts on within-session difference geometry, so held-out
    real-class pseudo-sessions measure it faithfully. Calibration depends on
    absolute class directions and can overfit the base ones, so it must
    prove itself on mixup-built virtual sessions whose directions are
    unseen, like the classes it will meet after deployment.
    """
    seed = int(seeding.derive_rng(config.seed, seeding.META, 999_983).integers(2**31))
    tasks = config.validation_tasks
    ref_on = False
    if config.use_refinement:
        with_ref = _pseudo_accuracy(base_embeddings, graph, config, way, shot, query,
                                    seed, tasks, edge=edge, attention=None)
        without = _pseudo_accuracy(base_embeddings, graph, config, way, shot, query,
                                   seed, tasks, edge=None, attention=None)
        ref_on = with_ref > without
    cal_on = False
    if config.use_calibration:
        chosen_edge = edge if ref_on else None
        with_cal = _virtual_session_accuracy(base_embeddings, graph, config, way, shot, query,
                                             seed, tasks, edge=chosen_edge, attention=attention)
        without = _virtual_session_accuracy(base_embeddings, graph, config, way, shot, query,
                                            seed, tasks, edge=chosen_edge, attention=None)
        cal_on = with_cal > without
    return ref_on, cal_on


def stage2_meta_train(state: ModelState, stream: SessionStream, config: TrainConfig):
    """Meta-train edge encoder + attention on pseudo-incremental tasks.

    Returns (new state, per-iteration loss records). The extractor and the
    class graph are read-only here. After training, each module is validated
    on held-out pseudo-sessions and deactivated if its no-op replacement
    scores at least as well.
    """
    config.validate()
    if state.stage != 1:
        raise ConfigError(f"stage 2 requires a stage-1 state, got stage {state.stage}")
    way, shot, query = config.pseudo_shape(stream.config)
    base_embeddings = embed_dataset(state.backbone, stream.sessions[0], config.normalize_features)
    edge = state.edge.copy()
    attention = state.attention.copy()
    edge_opt = _Adam([a for _, a in edge.arrays()], config.meta_lr)
    attn_opt = _Adam([a for _, a in attention.arrays()], config.meta_lr,
                     weight_decay=config.attention_decay)

    records: list[MetaIterationRecord] = []
    for it in range(config.meta_iterations):
        episodes, virtuals = sample_pseudo_task(
            base_embeddings, config, seed=seeding.derive_rng(config.seed, seeding.META, it).integers(2**31),
            way=way, shot=shot, query_per_class=query,
        )
        by_episode = {v.sources[0]: v for v in virtuals}
        sgn_vals, cgn_vals = [], []
        edge_total = edge.zero_grads()
        attn_total = attention.zero_grads()
        for t, episode in enumerate(episodes):
            l_s, l_c, e_g, a_g = _episode_losses(
                edge, attention, state.graph, episode, by_episode.get(t), config,
            )
            sgn_vals.append(l_s)
            cgn_vals.append(l_c)
            for acc, g in zip(edge_total, e_g):
                acc += g
            for acc, g in zip(attn_total, a_g):
                acc += g
        l_sgn = float(np.mean(sgn_vals))
        l_cgn = float(np.mean(cgn_vals))
        total = total_loss(l_sgn, l_cgn, config.alpha)
        if not np.isfinite(total):
            raise DivergedLoss(f"meta-training loss diverged at iteration {it}")
        # d(total)/d(params) = alpha * mean over episodes of the class-level
        # grads; with alpha = 0 the class-level pathway is inert and nothing
        # (not even decay) may move
        if config.alpha > 0:
            coeff = config.alpha / len(episodes)
            anneal = 0.5 * (1.0 + np.cos(np.pi * it / max(1, config.meta_iterations)))
            edge_opt.step([coeff * g for g in edge_total], lr_scale=anneal)
            attn_opt.step([coeff * g for g in attn_total], lr_scale=anneal)
        records.append(MetaIterationRecord(it, l_sgn, l_cgn, total))

    refinement_active, calibration_active = True, True
    if config.validate_modules and config.meta_iterations > 0:
        refinement_active, calibration_active = _select_modules(
            base_embeddings, state.graph, config, way, shot, query, edge, attention,
        )
    new_state = replace(state, edge=edge, attention=attention, stage=2,
                        refinement_active=refinement_active,
                        calibration_active=calibration_active)
    return new_state, records


def evaluate_pseudo_tasks(state: ModelState, stream: SessionStream, config: TrainConfig,
                          seed: int, task_count: int = 20) -> float:
    """Held-out pseudo-session query accuracy.

    Queries are scored over the surviving old nodes plus the session's
    calibrated classes, mirroring the training loss; chance is well below
    1/way because old classes compete too.
    """
    way, shot, query = config.pseudo_shape(stream.config)
    base_embeddings = embed_dataset(state.backbone, stream.sessions[0], config.normalize_features)
    return _pseudo_accuracy(
        base_embeddings, state.graph, config, way, shot, query,
        seed=seed, task_count=task_count,
        edge=state.edge if config.use_refinement and state.refinement_active else None,
        attention=state.attention if config.use_calibration and state.calibration_active else None,
    )


def _session_features(state: ModelState, edge: EdgeEncoderParams, attention: AttentionParams,
                      z: np.ndarray, y: np.ndarray, config: TrainConfig):
    if config.use_refinement and state.refinement_active:
        feats, order, _ = refine_forward(edge, z, y, config.sgn_rounds)
    else:
        order = np.unique(y)
        feats = np.stack([z[y == c].mean(axis=0) for c in order])
    if config.use_calibration and state.calibration_active:
        fhat, _ = nnops.unit_rows(feats)
        out, _ = calibrate_forward(state.graph.features, fhat, attention)
    else:
        out = feats
    return order, out


def stage3_incremental(state: ModelState, stream: SessionStream, config: TrainConfig):
    """Walk the incremental sessions, growing the class graph.

    Returns (final state, one graph snapshot per incremental session). By
    default no parameters train here; `stage3_finetune` gates a per-session
    refresh of the edge encoder and attention on the support set.
    """
    config.validate()
    if state.stage != 2:
        raise ConfigError(f"stage 3 requires a stage-2 state, got stage {state.stage}")
    edge = state.edge.copy()
    attention = state.attention.copy()
    graph = state.graph
    snapshots: list[ClassGraph] = []
    work = replace(state, edge=edge, attention=attention)
    for t in range(1, len(stream.sessions)):
        session = stream.sessions[t]
        z = embed_batch(state.backbone, session.payload_matrix(), config.normalize_features)
        y = session.label_vector()
        overlap = set(int(v) for v in np.unique(y)) & graph.label_set()
        if overlap:
            raise LabelCollision(f"session {t} reuses labels {sorted(overlap)}")
        work = replace(work, graph=graph)
        if config.stage3_finetune:
            _finetune_on_support(work, z, y, config)
        order, feats = _session_features(work, edge, attention, z, y, config)
        calibrated = [CalibratedClassFeature(int(c), feats[i]) for i, c in enumerate(order)]
        graph = insert_calibrated(graph, calibrated, session=t)
        snapshots.append(graph)
    return replace(work, graph=graph, stage=3), snapshots


def _finetune_on_support(state: ModelState, z: np.ndarray, y: np.ndarray,
                         config: TrainConfig) -> None:
    """Optional stage-3 refresh of edge/attention on the few-shot support.

    The class-level loss scores support samples over old nodes plus this
    session's calibrated features; updates happen in place.
    """
    edge, attention, graph = state.edge, state.attention, state.graph
    edge_opt = _Adam([a for _, a in edge.arrays()], config.stage3_lr)
    attn_opt = _Adam([a for _, a in attention.arrays()], config.stage3_lr,
                     weight_decay=config.attention_decay)
    for it in range(config.stage3_iterations):
        if config.use_refinement and state.refinement_active:
            feats, order, r_cache = refine_forward(edge, z, y, config.sgn_rounds)
        else:
            order = np.unique(y)
            feats = np.stack([z[y == c].mean(axis=0) for c in order])
            r_cache = None
        if config.use_calibration and state.calibration_active:
            fhat, fnorms = nnops.unit_rows(feats)
            calibrated, c_cache = calibrate_forward(graph.features, fhat, attention)
        else:
            fhat, fnorms, c_cache = None, None, None
            calibrated = feats
        refs = np.vstack([graph.features, calibrated])
        targets = graph.node_count + np.searchsorted(order, y)
        loss, _, d_refs = nnops.cosine_ce(z, targets, refs, config.scale)
        if not np.isfinite(loss):
            raise DivergedLoss(f"stage-3 fine-tune diverged at iteration {it}")
        d_cal = d_refs[graph.node_count :]
        edge_grads = edge.zero_grads()
        attn_grads = attention.zero_grads()
        if c_cache is not None:
            d_fhat, dw_key, dw_query = calibrate_backward(attention, c_cache, d_cal)
            attn_grads[0] += dw_key
            attn_grads[1] += dw_query
            d_feats = nnops.unit_rows_backward(fhat, fnorms, d_fhat)
        else:
            d_feats = d_cal
        if r_cache is not None and not edge.clamp_zero:
            _, e_grads = refine_backward(edge, r_cache, d_feats)
            for acc, g in zip(edge_grads, e_grads):
                acc += g
        anneal = 0.5 * (1.0 + np.cos(np.pi * it / max(1, config.stage3_iterations)))
        edge_opt.step([config.alpha * g for g in edge_grads], lr_scale=anneal)
        attn_opt.step([config.alpha * g for g in attn_grads], lr_scale=anneal)


def write_loss_log(records: list[MetaIterationRecord], path: str) -> None:
    """Line-oriented transcript: iteration, sample-level, class-level, total."""
    try:
        with open(path, "a", encoding="utf-8") as fh:
            for rec in records:
                fh.write(f"{rec.iteration} {rec.sgn_loss:.8f} {rec.cgn_loss:.8f} {rec.total:.8f}\n")
    except OSError as exc:
        raise IoError(f"cannot append loss log {path!r}: {exc}") from exc


def save_state(state: ModelState, path: str) -> None:
    """Bit-exact ModelState checkpoint (extractor, head, graph nets, graph)."""
    try:
        with open(path, "wb") as fh:
            fh.write(STATE_MAGIC)
            fh.write(struct.pack("<II", STATE_VERSION, state.stage))
            flags = (
                int(state.edge.clamp_zero)
                | (int(state.attention.normalize) << 1)
                | (int(state.refinement_active) << 2)
                | (int(state.calibration_active) << 3)
            )
            fh.write(struct.pack("<IIdI", flags, state.attention.head_count,
                                 state.head.scale, len(state.backbone.weights)))
            serialize.write_array_block(fh, dict(state.backbone.arrays()))
            serialize.write_array_block(fh, {"weights": state.head.weights, "labels": state.head.labels})
            serialize.write_array_block(fh, dict(state.edge.arrays()))
            serialize.write_array_block(fh, dict(state.attention.arrays()))
            serialize.write_array_block(fh, {
                "labels": state.graph.labels,
                "features": state.graph.features,
                "edges": state.graph.edges,
                "sessions": state.graph.sessions,
            })
    except OSError as exc:
        raise IoError(f"cannot write state checkpoint {path!r}: {exc}") from exc


def load_state(path: str) -> ModelState:
    try:
        with open(path, "rb") as fh:
            if fh.read(len(STATE_MAGIC)) != STATE_MAGIC:
                raise IoError(f"{path!r} is not a model-state checkpoint")
            version, stage = struct.unpack("<II", fh.read(8))
            if version != STATE_VERSION:
                raise IoError(f"unsupported state version {version}")
            flags, head_count, scale, n_layers = struct.unpack("<IIdI", fh.read(20))
            bb = serialize.read_array_block(fh)
            head_block = serialize.read_array_block(fh)
            edge_block = serialize.read_array_block(fh)
            attn_block = serialize.read_array_block(fh)
            graph_block = serialize.read_array_block(fh)
    except OSError as exc:
        raise IoError(f"cannot read state checkpoint {path!r}: {exc}") from exc
    backbone = MlpParams(
        [bb[f"w{i}"] for i in range(n_layers)],
        [bb[f"b{i}"] for i in range(n_layers)],
    )
    head = ClassifierHead(head_block["weights"], head_block["labels"], scale)
    edge = EdgeEncoderParams(
        **{k: edge_block[k] for k in ("w1", "b1", "g1", "be1", "w2", "b2", "g2", "be2", "w3", "b3")},
        clamp_zero=bool(flags & 1),
    )
    attention = AttentionParams(
        attn_block["w_key"], attn_block["w_query"],
        head_count=head_count, normalize=bool(flags & 2),
    )
    graph = ClassGraph(
        graph_block["labels"], graph_block["features"],
        graph_block["edges"], graph_block["sessions"],
    )
    return ModelState(backbone=backbone, head=head, edge=edge,
                      attention=attention, graph=graph, stage=stage,
                      refinement_active=bool(flags & 4),
                      calibration_active=bool(flags & 8))

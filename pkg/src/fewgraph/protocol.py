"""Session streams and episode sampling for class-incremental evaluation.

A stream starts with a data-rich base session followed by `session_count`
incremental sessions of `n_way` fresh classes with `k_shot` samples each.
Label spaces of distinct sessions are disjoint and the test set of session
t covers every class seen up to and including t.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import seeding
from .datasets import LabeledDataset
from .errors import ConfigError, IndexOutOfRange, InsufficientClasses, InsufficientSamples


@dataclass(frozen=True)
class ProtocolConfig:
    base_class_count: int
    n_way: int
    k_shot: int
    query_per_class: int
    session_count: int
    seed: int
    test_fraction: float = 0.2

    def validate(self) -> None:
        if self.base_class_count < 1:
            raise ConfigError("base_class_count must be >= 1")
        if self.n_way < 2:
            raise ConfigError("n_way must be >= 2")
        if self.k_shot < 1:
            raise ConfigError("k_shot must be >= 1")
        if self.query_per_class < 0:
            raise ConfigError("query_per_class must be >= 0")
        if self.session_count < 0:
            raise ConfigError("session_count must be >= 0")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("test_fraction must lie in (0, 1)")

    @property
    def total_class_budget(self) -> int:
        return self.base_class_count + self.session_count * self.n_way


@dataclass
class SessionStream:
    """Ordered sessions (index 0 = base) with cumulative test sets."""

    sessions: list[LabeledDataset]
    label_spaces: list[tuple[int, ...]]
    test_sets: list[LabeledDataset]
    config: ProtocolConfig

    @property
    def session_count(self) -> int:
        return len(self.sessions) - 1


@dataclass
class Episode:
    """One few-shot task: class-major support plus a query set."""

    support: list[tuple[np.ndarray, int]]
    query: list[tuple[np.ndarray, int]]
    way: int
    shot: int

    def support_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        x = np.stack([np.asarray(p, dtype=np.float64).ravel() for p, _ in self.support])
        y = np.array([lab for _, lab in self.support], dtype=np.int64)
        return x, y

    def query_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.query:
            d = np.asarray(self.support[0][0]).size
            return np.empty((0, d)), np.empty(0, dtype=np.int64)
        x = np.stack([np.asarray(p, dtype=np.float64).ravel() for p, _ in self.query])
        y = np.array([lab for _, lab in self.query], dtype=np.int64)
        return x, y

    def labels(self) -> tuple[int, ...]:
        return tuple(sorted({lab for _, lab in self.support}))


def build_session_stream(
    dataset: LabeledDataset,
    config: ProtocolConfig,
    test_dataset: LabeledDataset | None = None,
) -> SessionStream:
    """Split classes into base + incremental sessions and carve test sets.

    Class-to-session assignment shuffles the class ids with the config seed
    and slices contiguously, base first. When no explicit `test_dataset` is
    given, a per-class held-out split (`test_fraction`, at least one sample)
    is carved from `dataset` before any session sees it.
    """
    config.validate()
    all_classes = list(dataset.labels())
    if len(all_classes) < config.total_class_budget:
        raise InsufficientClasses(
            f"need {config.total_class_budget} classes, dataset has {len(all_classes)}"
        )

    rng = seeding.derive_rng(config.seed, seeding.STREAM)
    order = [all_classes[i] for i in rng.permutation(len(all_classes))]
    used = order[: config.total_class_budget]
    spaces = [tuple(sorted(used[: config.base_class_count]))]
    for t in range(config.session_count):
        lo = config.base_class_count + t * config.n_way
        spaces.append(tuple(sorted(used[lo : lo + config.n_way])))

    # per-class train pools and test pools
    train_pool: dict[int, list[int]] = {}
    test_pool_ds: LabeledDataset
    if test_dataset is not None:
        for label in used:
            if test_dataset.count_of(label) < 1:
                raise InsufficientSamples(f"test dataset has no samples for class {label}")
            train_pool[label] = dataset.indices_of(label)
        test_pool_ds = test_dataset
    else:
        held_out: list[int] = []
        for label in sorted(used):
            idx = dataset.indices_of(label)
            perm = rng.permutation(len(idx))
            n_test = max(1, int(round(config.test_fraction * len(idx))))
            if n_test >= len(idx):
                raise InsufficientSamples(f"class {label} too small to carve a test split")
            held_out.extend(idx[p] for p in perm[:n_test])
            train_pool[label] = sorted(idx[p] for p in perm[n_test:])
        test_pool_ds = dataset.subset(sorted(held_out))

    for space in spaces[1:]:
        for label in space:
            if len(train_pool[label]) < config.k_shot:
                raise InsufficientSamples(
                    f"class {label} has {len(train_pool[label])} train samples, needs k_shot={config.k_shot}"
                )

    sessions = [dataset.subset([i for label in spaces[0] for i in train_pool[label]])]
    for t, space in enumerate(spaces[1:], start=1):
        picked: list[int] = []
        for label in space:
            pool = train_pool[label]
            perm = seeding.derive_rng(config.seed, seeding.STREAM, t, label).permutation(len(pool))
            picked.extend(pool[p] for p in perm[: config.k_shot])
        sessions.append(dataset.subset(picked))

    test_sets = []
    for t in range(len(spaces)):
        seen = [label for space in spaces[: t + 1] for label in space]
        test_sets.append(test_pool_ds.restrict_to(seen))

    return SessionStream(sessions=sessions, label_spaces=spaces, test_sets=test_sets, config=config)


def cumulative_label_set(stream: SessionStream, t: int) -> set[int]:
    """Union of the label spaces of sessions 0..t."""
    if not 0 <= t < len(stream.sessions):
        raise IndexOutOfRange(f"session index {t} outside [0, {len(stream.sessions) - 1}]")
    out: set[int] = set()
    for space in stream.label_spaces[: t + 1]:
        out.update(space)
    return out


def sample_episode(
    dataset: LabeledDataset,
    way: int,
    shot: int,
    query_per_class: int,
    seed: int,
) -> Episode:
    """Draw a `way`-way `shot`-shot episode with disjoint support/query."""
    if way < 1 or shot < 1 or query_per_class < 0:
        raise ConfigError("way >= 1, shot >= 1, query_per_class >= 0 required")
    need = shot + query_per_class
    eligible = [label for label in dataset.labels() if dataset.count_of(label) >= need]
    if len(eligible) < way:
        raise InsufficientSamples(
            f"need {way} classes with >= {need} samples, found {len(eligible)}"
        )
    rng = seeding.derive_rng(seed, seeding.EPISODE)
    chosen = [eligible[i] for i in rng.choice(len(eligible), size=way, replace=False)]
    support: list[tuple[np.ndarray, int]] = []
    query: list[tuple[np.ndarray, int]] = []
    for label in chosen:
        idx = dataset.indices_of(label)
        perm = rng.permutation(len(idx))
        for p in perm[:shot]:
            support.append(dataset.samples[idx[p]])
        for p in perm[shot:need]:
            query.append(dataset.samples[idx[p]])
    return Episode(support=support, query=query, way=way, shot=shot)


def describe_stream(stream: SessionStream) -> str:
    """One audit record per session: index, labels, sample counts."""
    lines = []
    for t, (session, space, test) in enumerate(
        zip(stream.sessions, stream.label_spaces, stream.test_sets)
    ):
        labels = ",".join(str(x) for x in space)
        lines.append(
            f"session={t} classes={len(space)} train_samples={len(session)} "
            f"test_samples={len(test)} labels={labels}"
        )
    return "\n".join(lines) + "\n"

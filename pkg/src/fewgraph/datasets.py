"""Labeled datasets: in-memory container, file loaders, synthetic reference.

Payloads are numpy arrays (feature vectors or tiny images); labels are
integers. Loaders accept the two supported on-disk layouts:

* a directory tree ``<root>/<class_id>/<sample files>`` with one ``.npy``
  or whitespace/comma text vector per file, and
* a self-describing feature table, either CSV (header ``label,f0,f1,...``)
  or NPZ (arrays ``labels`` and ``features``).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import seeding
from .errors import ConfigError

Sample = tuple[np.ndarray, int]


@dataclass
class LabeledDataset:
    """Immutable list of (payload, label) with a per-class index."""

    samples: list[Sample]
    _by_class: dict[int, list[int]] = field(init=False, repr=False)

    def __post_init__(self):
        index: dict[int, list[int]] = {}
        for pos, (_, label) in enumerate(self.samples):
            index.setdefault(int(label), []).append(pos)
        self._by_class = index

    def __len__(self) -> int:
        return len(self.samples)

    def labels(self) -> tuple[int, ...]:
        return tuple(sorted(self._by_class))

    @property
    def class_count(self) -> int:
        return len(self._by_class)

    def indices_of(self, label: int) -> list[int]:
        return list(self._by_class.get(int(label), []))

    def count_of(self, label: int) -> int:
        return len(self._by_class.get(int(label), []))

    def subset(self, indices) -> "LabeledDataset":
        return LabeledDataset([self.samples[i] for i in indices])

    def restrict_to(self, labels) -> "LabeledDataset":
        keep = set(int(x) for x in labels)
        return LabeledDataset([s for s in self.samples if s[1] in keep])

    def payload_matrix(self) -> np.ndarray:
        return np.stack([np.asarray(p, dtype=np.float64).ravel() for p, _ in self.samples])

    def label_vector(self) -> np.ndarray:
        return np.array([lab for _, lab in self.samples], dtype=np.int64)


def make_synthetic_reference(
    class_count: int = 20,
    dim: int = 16,
    radius: float = 4.0,
    train_per_class: int = 200,
    test_per_class: int = 50,
    seed: int = 0,
    family_count: int = 4,
    family_spread: float = 0.5,
    outlier_fraction: float = 0.0,
    outlier_scale: float = 3.0,
    mislabel_fraction: float = 0.15,
) -> tuple[LabeledDataset, LabeledDataset]:
    """Gaussian clusters with means on a sphere, plus label noise.

    Class mean directions come from `family_count` correlated families
    (center plus `family_spread` jitter, renormalized onto the sphere), so
    classes arriving later have relatives among earlier ones. A
    `mislabel_fraction` of training samples is drawn from a different
    class's cluster while keeping its label: those shots corrupt few-shot
    class means in a way no extractor can undo from the label alone, which
    is what neighbour-based sample aggregation exists to repair. Test data
    stays clean. An optional heavy tail (`outlier_fraction` of samples at
    `outlier_scale` times the unit noise) is also available. Everything
    stays brute-force verifiable.
    """
    if class_count < 1 or dim < 2:
        raise ConfigError("synthetic reference needs class_count >= 1 and dim >= 2")
    if family_count < 1 or family_spread <= 0:
        raise ConfigError("family_count >= 1 and family_spread > 0 required")
    if not 0.0 <= outlier_fraction < 1.0 or outlier_scale < 1.0:
        raise ConfigError("outlier_fraction in [0, 1) and outlier_scale >= 1 required")
    if not 0.0 <= mislabel_fraction < 1.0:
        raise ConfigError("mislabel_fraction must lie in [0, 1)")
    rng = seeding.derive_rng(seed, seeding.DATASET)
    centers = rng.normal(size=(family_count, dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    means = np.empty((class_count, dim))
    for label in range(class_count):
        direction = centers[label % family_count] + family_spread * rng.normal(size=dim)
        means[label] = radius * direction / np.linalg.norm(direction)

    train: list[Sample] = []
    test: list[Sample] = []
    for label in range(class_count):
        for out, count, noisy in ((train, train_per_class, True), (test, test_per_class, False)):
            source = np.full(count, label)
            if noisy and mislabel_fraction > 0 and class_count > 1:
                flip = rng.random(count) < mislabel_fraction
                others = rng.integers(0, class_count - 1, size=count)
                others += others >= label
                source[flip] = others[flip]
            scales = np.where(rng.random(count) < outlier_fraction, outlier_scale, 1.0) if noisy else np.ones(count)
            points = means[source] + scales[:, None] * rng.normal(size=(count, dim))
            out.extend((points[i], label) for i in range(count))
    return LabeledDataset(train), LabeledDataset(test)


def load_directory_dataset(root: str) -> LabeledDataset:
    """Load `<root>/<class_id>/<sample files>`; files are .npy or text vectors."""
    if not os.path.isdir(root):
        raise ConfigError(f"dataset root {root!r} is not a directory")
    samples: list[Sample] = []
    for entry in sorted(os.listdir(root)):
        class_dir = os.path.join(root, entry)
        if not os.path.isdir(class_dir):
            continue
        try:
            label = int(entry)
        except ValueError as exc:
            raise ConfigError(f"class directory {entry!r} is not an integer label") from exc
        for fname in sorted(os.listdir(class_dir)):
            path = os.path.join(class_dir, fname)
            if fname.endswith(".npy"):
                payload = np.load(path).astype(np.float64)
            else:
                with open(path, "r", encoding="utf-8") as fh:
                    text = fh.read()
                delim = "," if "," in text else None
                payload = np.atleast_1d(np.loadtxt(text.splitlines(), delimiter=delim, dtype=np.float64)).ravel()
            samples.append((payload, label))
    if not samples:
        raise ConfigError(f"no samples found under {root!r}")
    return LabeledDataset(samples)


def load_feature_csv(path: str) -> LabeledDataset:
    """CSV with header `label,f0,f1,...` and one sample per row."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        if not header or header[0] != "label":
            raise ConfigError(f"{path!r}: first CSV column must be 'label'")
        width = len(header) - 1
        samples: list[Sample] = []
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            cells = line.split(",")
            if len(cells) != width + 1:
                raise ConfigError(f"{path!r}:{lineno}: expected {width + 1} columns")
            samples.append((np.array([float(c) for c in cells[1:]]), int(cells[0])))
    if not samples:
        raise ConfigError(f"{path!r}: no data rows")
    return LabeledDataset(samples)


def save_feature_csv(dataset: LabeledDataset, path: str) -> None:
    width = dataset.samples[0][0].size
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("label," + ",".join(f"f{i}" for i in range(width)) + "\n")
        for payload, label in dataset.samples:
            fh.write(str(int(label)) + "," + ",".join(repr(float(v)) for v in np.ravel(payload)) + "\n")


def load_feature_npz(path: str) -> LabeledDataset:
    """NPZ with `labels` (n,) and `features` (n, d) arrays."""
    data = np.load(path)
    if "labels" not in data or "features" not in data:
        raise ConfigError(f"{path!r}: needs 'labels' and 'features' arrays")
    labels = data["labels"].astype(np.int64)
    features = data["features"].astype(np.float64)
    if labels.shape[0] != features.shape[0]:
        raise ConfigError(f"{path!r}: labels/features row counts differ")
    return LabeledDataset([(features[i], int(labels[i])) for i in range(labels.shape[0])])


def save_feature_npz(dataset: LabeledDataset, path: str) -> None:
    np.savez(path, labels=dataset.label_vector(), features=dataset.payload_matrix())

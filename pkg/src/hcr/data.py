"""Synthetic datasets, CSV I/O, label masking, label noise and augmentation."""
import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .exceptions import EmptyFile, ParseError, ProportionTooSmall
from .geometry import project_to_sphere

NOISE_KINDS = ("symmetric", "asymmetric", "instance")
EXTRA_COLUMNS = ("true_label", "observed_label", "labeled")


@dataclass
class LabeledDataset:
    features: np.ndarray
    true_labels: np.ndarray
    observed_labels: np.ndarray
    labeled_mask: np.ndarray
    num_classes: int
    # original label value -> dense index, when labels were re-indexed
    label_mapping: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.true_labels = np.asarray(self.true_labels, dtype=np.int64)
        self.observed_labels = np.asarray(self.observed_labels, dtype=np.int64)
        self.labeled_mask = np.asarray(self.labeled_mask, dtype=bool)
        n = self.features.shape[0]
        for name in ("true_labels", "observed_labels", "labeled_mask"):
            if getattr(self, name).shape != (n,):
                raise ValueError(f"{name} must have {n} entries")
        for labels in (self.true_labels, self.observed_labels):
            if n and (labels.min() < 0 or labels.max() >= self.num_classes):
                raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return self.features.shape[0]

    @property
    def n_labeled(self):
        return int(self.labeled_mask.sum())

    def subset(self, index):
        return replace(
            self,
            features=self.features[index],
            true_labels=self.true_labels[index],
            observed_labels=self.observed_labels[index],
            labeled_mask=self.labeled_mask[index],
        )

    def to_csv(self, path):
        """Feature columns ``f0..``, ``label`` (observed), then the
        ``true_label,observed_label,labeled`` bookkeeping columns."""
        d = self.features.shape[1]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow([f"f{i}" for i in range(d)] + ["label", *EXTRA_COLUMNS])
            for x, t, o, m in zip(self.features, self.true_labels,
                                  self.observed_labels, self.labeled_mask):
                writer.writerow([f"{v:.17g}" for v in x] + [o, t, o, int(m)])


def _fully_labeled(features, labels, num_classes):
    return LabeledDataset(features, labels, labels.copy(),
                          np.ones(len(labels), dtype=bool), num_classes)


def make_sphere_blobs(num_classes, dim, per_class, concentration=25.0, seed=None):
    """Gaussian blobs around random unit-sphere centers, re-projected to the sphere.

    Each sample is ``normalize(center + noise)`` with per-coordinate noise
    variance ``1 / concentration``.
    """
    if num_classes < 2 or dim < 2:
        raise ValueError("need num_classes >= 2 and dim >= 2")
    if not concentration > 0:
        raise ValueError("concentration must be positive")
    rng = np.random.default_rng(seed)
    centers = project_to_sphere(rng.standard_normal((num_classes, dim)))
    labels = np.repeat(np.arange(num_classes), per_class)
    noise = rng.standard_normal((labels.size, dim)) / math.sqrt(concentration)
    x = project_to_sphere(centers[labels] + noise)
    return _fully_labeled(x, labels, num_classes)


def make_shell_dataset(num_classes, dim, per_class, seed=None, jitter=0.05):
    """Concentric shells: class ``c`` lies near the sphere of radius ``1 + 0.5 c``."""
    if num_classes < 2 or dim < 2:
        raise ValueError("need num_classes >= 2 and dim >= 2")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(num_classes), per_class)
    directions = project_to_sphere(rng.standard_normal((labels.size, dim)))
    radii = 1.0 + 0.5 * labels
    x = directions * radii[:, None] + jitter * rng.standard_normal((labels.size, dim))
    return _fully_labeled(x, labels, num_classes)


def _parse_int(text, row, column):
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"non-numeric label {text!r}", row, column) from None
    if not value.is_integer():
        raise ParseError(f"label {text!r} is not an integer", row, column)
    return int(value)


def load_csv_dataset(path, label_column="label"):
    """Read a CSV with a header, numeric feature columns and an integer label.

    Labels are re-indexed densely to ``[0, K)`` in sorted order; the mapping
    is kept on ``label_mapping``. Files written by
    :meth:`LabeledDataset.to_csv` round-trip, including noise and masking.
    """
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if r and any(c.strip() for c in r)]
    if not rows:
        raise EmptyFile(f"{path} is empty")
    header = [h.strip() for h in rows[0]]
    if len(rows) < 2:
        raise EmptyFile(f"{path} has a header but no data rows")
    if label_column not in header:
        raise ParseError(f"label column {label_column!r} not in header", 1, label_column)

    label_idx = header.index(label_column)
    extra = {name: header.index(name) for name in EXTRA_COLUMNS if name in header}
    feature_idx = [i for i, h in enumerate(header)
                   if i != label_idx and h not in extra]

    feats = np.empty((len(rows) - 1, len(feature_idx)))
    raw_obs = []
    raw_true = []
    labeled = []
    for r, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} fields, got {len(row)}", r)
        for j, c in enumerate(feature_idx):
            try:
                feats[r - 2, j] = float(row[c])
            except ValueError:
                raise ParseError(f"non-numeric value {row[c]!r}", r, header[c]) from None
        obs_col = extra.get("observed_label", label_idx)
        raw_obs.append(_parse_int(row[obs_col], r, header[obs_col]))
        true_col = extra.get("true_label", obs_col)
        raw_true.append(_parse_int(row[true_col], r, header[true_col]))
        if "labeled" in extra:
            labeled.append(_parse_int(row[extra["labeled"]], r, "labeled") != 0)
        else:
            labeled.append(True)

    values = sorted(set(raw_obs) | set(raw_true))
    mapping = {v: i for i, v in enumerate(values)}
    return LabeledDataset(
        features=feats,
        true_labels=np.array([mapping[v] for v in raw_true]),
        observed_labels=np.array([mapping[v] for v in raw_obs]),
        labeled_mask=np.array(labeled),
        num_classes=len(values),
        label_mapping=mapping,
    )


def mask_labels(ds, proportion, seed=None):
    """Keep ``round(proportion * N_c)`` labels per observed class, hide the rest."""
    if not 0.0 < proportion <= 1.0:
        raise ValueError("proportion must lie in (0, 1]")
    if not ds.labeled_mask.all():
        raise ValueError("mask_labels expects a fully labeled dataset")
    rng = np.random.default_rng(seed)
    mask = np.zeros(len(ds), dtype=bool)
    for c in range(ds.num_classes):
        members = np.flatnonzero(ds.observed_labels == c)
        if members.size == 0:
            continue
        keep = int(math.floor(proportion * members.size + 0.5))
        if keep == 0:
            raise ProportionTooSmall(
                f"class {c} has {members.size} examples; proportion {proportion} "
                "leaves none labeled"
            )
        mask[rng.choice(members, size=keep, replace=False)] = True
    return replace(ds, labeled_mask=mask)


@dataclass
class NoiseSpec:
    kind: str = "symmetric"
    rate: float = 0.0
    seed: int = None

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"noise kind must be one of {NOISE_KINDS}, got {self.kind!r}")
        if not 0.0 <= self.rate < 1.0:
            raise ValueError("noise rate must lie in [0, 1)")


def _class_centers(ds):
    centers = np.zeros((ds.num_classes, ds.features.shape[1]))
    for c in range(ds.num_classes):
        members = ds.true_labels == c
        if members.any():
            centers[c] = ds.features[members].mean(axis=0)
    return centers


def instance_flip_probabilities(ds, rate):
    """Per-example flip probability ``rate * N * a_i / sum(a)``, clipped to [0, 1].

    ``a_i = exp(-margin_i)`` where the margin is the gap between the two
    smallest distances from the example to the class centers.
    """
    centers = _class_centers(ds)
    dist = np.linalg.norm(ds.features[:, None, :] - centers[None, :, :], axis=2)
    two = np.sort(dist, axis=1)[:, :2]
    ambiguity = np.exp(-(two[:, 1] - two[:, 0]))
    probs = rate * len(ds) * ambiguity / ambiguity.sum()
    return np.clip(probs, 0.0, 1.0), dist


def apply_noise(ds, spec):
    """Corrupt ``observed_labels``; features and ``true_labels`` are untouched."""
    k = ds.num_classes
    if k < 2:
        raise ValueError("label noise needs at least 2 classes")
    rng = np.random.default_rng(spec.seed)
    true = ds.true_labels
    n = len(ds)
    if spec.rate == 0.0:
        return replace(ds, observed_labels=true.copy())

    if spec.kind == "symmetric":
        flip = rng.random(n) < spec.rate
        shift = rng.integers(1, k, size=n)
        noisy = np.where(flip, (true + shift) % k, true)
    elif spec.kind == "asymmetric":
        flip = rng.random(n) < spec.rate
        noisy = np.where(flip, (true + 1) % k, true)
    else:
        probs, dist = instance_flip_probabilities(ds, spec.rate)
        flip = rng.random(n) < probs
        # nearest center that is not the example's own class
        others = dist.copy()
        others[np.arange(n), true] = np.inf
        noisy = np.where(flip, np.argmin(others, axis=1), true)
    return replace(ds, observed_labels=noisy.astype(np.int64))


@dataclass
class AugmentSpec:
    jitter_sigma: float = 0.1
    scale_range: tuple = (0.8, 1.25)

    def __post_init__(self):
        lo, hi = self.scale_range
        self.scale_range = (float(lo), float(hi))
        if self.jitter_sigma < 0:
            raise ValueError("jitter_sigma must be non-negative")
        if not 0.0 < lo <= hi:
            raise ValueError("scale_range must satisfy 0 < lo <= hi")


def augment(features, spec=None, seed=None):
    """Random per-row rescaling plus isotropic Gaussian jitter."""
    spec = AugmentSpec() if spec is None else spec
    x = np.asarray(features, dtype=np.float64)
    rng = np.random.default_rng(seed)
    lo, hi = spec.scale_range
    scale = rng.uniform(lo, hi, size=(x.shape[0], 1))
    jitter = rng.standard_normal(x.shape) * spec.jitter_sigma
    return x * scale + jitter


def stratified_split(ds, test_fraction, seed=None):
    """Split into (train, test) keeping class proportions by true label."""
    rng = np.random.default_rng(seed)
    test = []
    for c in range(ds.num_classes):
        members = np.flatnonzero(ds.true_labels == c)
        n_test = int(math.floor(test_fraction * members.size + 0.5))
        test.extend(rng.choice(members, size=n_test, replace=False).tolist())
    test_mask = np.zeros(len(ds), dtype=bool)
    test_mask[test] = True
    return ds.subset(~test_mask), ds.subset(test_mask)


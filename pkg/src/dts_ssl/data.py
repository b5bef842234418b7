"""Datasets, class-mismatch splits, augmentation, and paired batch sampling.

The training setup assumes a small labeled set drawn from K seen classes and
a large unlabeled set that mixes seen-class and unseen-class examples. The
fraction of unseen-class examples in the unlabeled set is the mismatch ratio.
Unlabeled examples carry a hidden seen/unseen flag that only evaluation code
is allowed to read.
"""

from __future__ import annotations

import csv
import json
import pickle
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import CapacityError, GenerationError, ShapeError, ValidationError
from .numerics import round_half_up


@dataclass
class Dataset:
    """A pool of labeled examples: feature rows plus 1-based class ids."""

    name: str
    features: np.ndarray  # (n, d) float64
    labels: np.ndarray  # (n,) int64 in 1..class_count
    class_count: int

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValidationError(f"features must be 2-D, got shape {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise ValidationError("labels must be a vector aligned with feature rows")
        if self.class_count < 1:
            raise ValidationError(f"class_count must be >= 1, got {self.class_count}")
        if len(self.labels) and (self.labels.min() < 1 or self.labels.max() > self.class_count):
            raise ValidationError(
                f"labels must lie in 1..{self.class_count}, "
                f"found range [{self.labels.min()}, {self.labels.max()}]"
            )

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def class_ids(self) -> tuple[int, ...]:
        return tuple(range(1, self.class_count + 1))


@dataclass
class MismatchSplit:
    """Labeled / unlabeled / test partitions with the seen classes remapped to 1..K.

    ``unlabeled_is_unseen`` is ground truth kept only for evaluation; training
    code paths never receive it.
    """

    labeled_x: np.ndarray
    labeled_y: np.ndarray  # remapped to 1..K
    unlabeled_x: np.ndarray
    unlabeled_is_unseen: np.ndarray  # (n,) bool, evaluation-only
    test_x: np.ndarray
    test_y: np.ndarray  # remapped to 1..K
    seen_class_ids: tuple[int, ...]  # original ids, sorted
    mismatch_ratio: float
    labeled_indices: np.ndarray  # indices into the source dataset
    unlabeled_indices: np.ndarray
    test_indices: np.ndarray
    source_name: str = ""
    seed: int = 0

    @property
    def K(self) -> int:
        return len(self.seen_class_ids)

    @property
    def dim(self) -> int:
        return self.labeled_x.shape[1]

    @property
    def label_map(self) -> dict[int, int]:
        """Original seen class id -> remapped id in 1..K (sorted order)."""
        return {orig: i + 1 for i, orig in enumerate(self.seen_class_ids)}


def build_mismatch_split(
    dataset: Dataset,
    seen_class_ids: Sequence[int],
    ratio: float,
    m: int,
    n: int,
    test_fraction: float = 0.2,
    seed: int = 0,
) -> MismatchSplit:
    """Carve a class-mismatch split out of ``dataset``.

    The unlabeled set gets round(n * ratio) unseen-class examples and the
    remainder from seen classes, shuffled together. The labeled and test sets
    contain only seen classes, with labels remapped to 1..K. Deterministic for
    a fixed seed.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValidationError(f"mismatch ratio must lie in [0, 1], got {ratio}")
    if not 0.0 < test_fraction < 1.0:
        raise ValidationError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    if m < 1 or n < 1:
        raise ValidationError(f"need m >= 1 and n >= 1, got m={m}, n={n}")
    seen = tuple(sorted(set(int(c) for c in seen_class_ids)))
    if not seen:
        raise ValidationError("seen_class_ids must be nonempty")
    if any(c not in dataset.class_ids for c in seen):
        raise ValidationError(f"seen_class_ids {seen} not all present in dataset classes")
    if ratio > 0 and len(seen) == dataset.class_count:
        raise ValidationError("ratio > 0 requires at least one unseen class in the dataset")

    n_unseen = round_half_up(n * ratio)
    n_seen = n - n_unseen

    rng = np.random.default_rng(seed)
    seen_mask = np.isin(dataset.labels, seen)
    seen_pool = np.flatnonzero(seen_mask)
    unseen_pool = np.flatnonzero(~seen_mask)
    rng.shuffle(seen_pool)
    rng.shuffle(unseen_pool)

    test_count = round_half_up(test_fraction * len(seen_pool))
    need = {
        "test (seen classes)": test_count,
        "labeled (seen classes)": m,
        "unlabeled seen-class": n_seen,
    }
    cursor = 0
    taken: dict[str, np.ndarray] = {}
    for pool_name, count in need.items():
        if cursor + count > len(seen_pool):
            raise CapacityError(
                f"{pool_name} pool exhausted: need {count} more examples, "
                f"only {len(seen_pool) - cursor} of {len(seen_pool)} seen-class examples left"
            )
        taken[pool_name] = seen_pool[cursor : cursor + count]
        cursor += count
    if n_unseen > len(unseen_pool):
        raise CapacityError(
            f"unlabeled unseen-class pool exhausted: need {n_unseen}, have {len(unseen_pool)}"
        )

    test_idx = taken["test (seen classes)"]
    labeled_idx = taken["labeled (seen classes)"]
    unlabeled_idx = np.concatenate([taken["unlabeled seen-class"], unseen_pool[:n_unseen]])
    rng.shuffle(unlabeled_idx)

    remap = {orig: i + 1 for i, orig in enumerate(seen)}
    relabel = np.vectorize(remap.get, otypes=[np.int64])

    return MismatchSplit(
        labeled_x=dataset.features[labeled_idx].copy(),
        labeled_y=relabel(dataset.labels[labeled_idx]),
        unlabeled_x=dataset.features[unlabeled_idx].copy(),
        unlabeled_is_unseen=~np.isin(dataset.labels[unlabeled_idx], seen),
        test_x=dataset.features[test_idx].copy(),
        test_y=relabel(dataset.labels[test_idx]),
        seen_class_ids=seen,
        mismatch_ratio=float(ratio),
        labeled_indices=labeled_idx.copy(),
        unlabeled_indices=unlabeled_idx.copy(),
        test_indices=test_idx.copy(),
        source_name=dataset.name,
        seed=seed,
    )


def generate_synthetic(
    k_seen: int,
    k_unseen: int,
    dim: int,
    per_class: int,
    separation: float = 6.0,
    noise: float = 1.0,
    seed: int = 0,
    name: str = "synthetic",
) -> Dataset:
    """Isotropic Gaussian clusters, one per class, centers pairwise >= ``separation`` apart.

    Classes 1..k_seen are intended as seen classes, the rest as unseen; the
    returned Dataset itself is just a labeled pool. Seen centers keep at least
    twice the separation between one another, while unseen centers are planted
    in the gaps between seen pairs: unseen-class samples then fall near seen
    decision boundaries, which is what makes class mismatch both harmful and
    detectable. Deterministic per seed.
    """
    if k_seen < 2:
        raise ValidationError(f"k_seen must be >= 2, got {k_seen}")
    if k_unseen < 0:
        raise ValidationError(f"k_unseen must be >= 0, got {k_unseen}")
    if dim < 2:
        raise ValidationError(f"dim must be >= 2, got {dim}")
    if per_class < 1:
        raise ValidationError(f"per_class must be >= 1, got {per_class}")
    if separation <= 0 or noise <= 0:
        raise ValidationError("separation and noise must be positive")

    rng = np.random.default_rng(seed)
    k_total = k_seen + k_unseen
    max_tries = 1000
    # Center coordinates are scaled so typical pairwise distances sit only
    # moderately above the enforced minimum; task difficulty then tracks the
    # separation/noise ratio instead of collapsing to trivial in high dim.
    seen_gap = 2.0 * separation
    center_scale = 1.4 * seen_gap / np.sqrt(2.0 * dim)
    centers: list[np.ndarray] = []

    def place(propose, accept, fallback=None) -> None:
        for attempt in range(max_tries):
            candidate = propose()
            if accept(candidate):
                centers.append(candidate)
                return
        # cramped geometries (low dim, few clusters) may not admit the
        # preferred margins; retry against the relaxed acceptance test
        if fallback is not None:
            for attempt in range(max_tries):
                candidate = propose()
                if fallback(candidate):
                    centers.append(candidate)
                    return
        raise GenerationError(
            f"could not place {k_total} cluster centers at separation {separation} "
            f"in {dim} dimensions after {max_tries} tries"
        )

    def min_dist_to(candidate: np.ndarray, group: list[np.ndarray]) -> float:
        return min((np.linalg.norm(candidate - c) for c in group), default=np.inf)

    for _ in range(k_seen):
        place(
            lambda: rng.normal(scale=center_scale, size=dim),
            lambda cand: min_dist_to(cand, centers) >= seen_gap,
        )
    seen_centers = list(centers)

    centroid = np.mean(seen_centers, axis=0)

    def between() -> np.ndarray:
        # between a seen pair's midpoint and the centroid of all seen
        # clusters: interior to the data region and near decision boundaries
        # (so the K-way classifier cannot be legitimately confident there)
        # yet well clear of every cluster core
        i, j = rng.choice(len(seen_centers), size=2, replace=False)
        mid = 0.5 * (seen_centers[i] + seen_centers[j])
        alpha = rng.uniform(0.45, 0.75)
        return alpha * centroid + (1 - alpha) * mid + rng.normal(scale=0.1 * separation, size=dim)

    contract = lambda cand: min_dist_to(cand, centers) >= separation
    for _ in range(k_unseen):
        # extra margin to seen cores keeps unseen clusters from drowning in a
        # third seen cluster; other unseen clusters only need the documented
        # minimum (they crowd the same interior region)
        try:
            place(
                between,
                lambda cand: min_dist_to(cand, seen_centers) >= 1.3 * separation
                and min_dist_to(cand, centers[k_seen:]) >= separation,
                fallback=contract,
            )
        except GenerationError:
            # few seen clusters leave no room between them; fall back to
            # free placement at the documented minimum distance
            place(lambda: rng.normal(scale=center_scale, size=dim), contract)

    features = np.vstack(
        [c + rng.normal(scale=noise, size=(per_class, dim)) for c in centers]
    )
    labels = np.repeat(np.arange(1, k_total + 1), per_class)
    return Dataset(name=name, features=features, labels=labels, class_count=k_total)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

AUGMENT_MODES = ("weak", "strong")


@dataclass(frozen=True)
class AugmentConfig:
    """Weak/strong augmentation strengths, expressed relative to feature scale.

    Weak views add small Gaussian jitter; strong views add larger jitter and
    zero out a fixed fraction of coordinates. For image-shaped inputs a random
    horizontal flip is applied first in both modes.
    """

    weak_sigma: float = 0.05
    strong_sigma: float = 0.2
    mask_fraction: float = 0.25
    image_shape: tuple[int, int, int] | None = None  # (h, w, c) enables flips


@dataclass(frozen=True)
class AugmentedView:
    vector: np.ndarray
    mode: str  # "weak" | "strong"
    source_index: int


def feature_scale(split: MismatchSplit) -> np.ndarray:
    """Per-feature standard deviation over labeled + unlabeled training inputs."""
    pooled = np.vstack([split.labeled_x, split.unlabeled_x])
    return pooled.std(axis=0)


def augment_batch(
    x: np.ndarray,
    mode: str,
    rng: np.random.Generator,
    scale: np.ndarray | float | None = None,
    config: AugmentConfig = AugmentConfig(),
) -> np.ndarray:
    """Produce one augmented view per row of ``x``. Output shape equals input shape.

    Random draws happen in a fixed order (flips, jitter, mask) so a seeded rng
    reproduces the same views.
    """
    if mode not in AUGMENT_MODES:
        raise ValidationError(f"unknown augmentation mode {mode!r}, expected one of {AUGMENT_MODES}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"augment_batch expects a (batch, dim) array, got shape {x.shape}")
    b, d = x.shape
    out = x.copy()

    if config.image_shape is not None:
        h, w, c = config.image_shape
        if h * w * c != d:
            raise ShapeError(f"image_shape {config.image_shape} does not match dim {d}")
        flip = rng.random(b) < 0.5
        imgs = out.reshape(b, h, w, c)
        imgs[flip] = imgs[flip, :, ::-1, :]
        out = imgs.reshape(b, d)

    sigma = config.weak_sigma if mode == "weak" else config.strong_sigma
    scale_arr = np.ones(d) if scale is None else np.broadcast_to(np.asarray(scale, dtype=np.float64), (d,))
    if sigma > 0:
        out = out + rng.standard_normal((b, d)) * (sigma * scale_arr)

    if mode == "strong":
        k = round_half_up(config.mask_fraction * d)
        if k > 0:
            # per-row choice of k coordinates without replacement
            masked_cols = rng.random((b, d)).argsort(axis=1)[:, :k]
            out[np.arange(b)[:, None], masked_cols] = 0.0
    return out


def augment(
    x: np.ndarray,
    mode: str,
    rng: np.random.Generator,
    scale: np.ndarray | float | None = None,
    config: AugmentConfig = AugmentConfig(),
    source_index: int = 0,
) -> AugmentedView:
    """Single-example convenience wrapper around :func:`augment_batch`."""
    vec = augment_batch(np.asarray(x, dtype=np.float64)[None, :], mode, rng, scale, config)[0]
    return AugmentedView(vector=vec, mode=mode, source_index=source_index)


# ---------------------------------------------------------------------------
# Batch sampling
# ---------------------------------------------------------------------------


@dataclass
class BatchPair:
    """One labeled batch plus its paired unlabeled batch (mu times larger)."""

    labeled_x: np.ndarray
    labeled_y: np.ndarray
    unlabeled_x: np.ndarray
    unlabeled_indices: np.ndarray  # positions within split.unlabeled_x


class PairSampler:
    """Draws paired batches from a split.

    Labeled examples are epoch-shuffled without replacement, so every epoch
    covers the whole labeled set (the final batch of an epoch may be short).
    Unlabeled examples are drawn uniformly with replacement, always exactly
    ``mu`` times the size of the labeled batch. Hidden seen/unseen flags are
    never exposed on the sampled batches.
    """

    def __init__(
        self,
        split: MismatchSplit,
        batch_size: int,
        mu: int,
        rng: np.random.Generator,
        include_unlabeled: bool = True,
    ) -> None:
        if batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {batch_size}")
        if mu < 1:
            raise ValidationError(f"mu must be >= 1, got {mu}")
        if len(split.labeled_x) == 0:
            raise ValidationError("split has no labeled examples")
        if include_unlabeled and len(split.unlabeled_x) == 0:
            raise ValidationError("split has no unlabeled examples")
        self.split = split
        self.batch_size = batch_size
        self.mu = mu
        self.rng = rng
        self.include_unlabeled = include_unlabeled
        self._order = np.arange(len(split.labeled_x))
        self._cursor = len(self._order)  # forces a shuffle on first draw

    @property
    def steps_per_epoch(self) -> int:
        m = len(self.split.labeled_x)
        return -(-m // self.batch_size)

    def next_batch_pair(self) -> BatchPair:
        m = len(self._order)
        if self._cursor >= m:
            self.rng.shuffle(self._order)
            self._cursor = 0
        idx = self._order[self._cursor : self._cursor + self.batch_size]
        self._cursor += len(idx)

        if self.include_unlabeled:
            u_idx = self.rng.integers(0, len(self.split.unlabeled_x), size=self.mu * len(idx))
            unlabeled_x = self.split.unlabeled_x[u_idx]
        else:
            u_idx = np.empty(0, dtype=np.int64)
            unlabeled_x = np.empty((0, self.split.dim))
        return BatchPair(
            labeled_x=self.split.labeled_x[idx],
            labeled_y=self.split.labeled_y[idx],
            unlabeled_x=unlabeled_x,
            unlabeled_indices=u_idx,
        )

    def epoch(self) -> Iterator[BatchPair]:
        for _ in range(self.steps_per_epoch):
            yield self.next_batch_pair()


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------


def _meta_path(path: Path) -> Path:
    return path.with_suffix(".meta.json")


def save_dataset(dataset: Dataset, path: str | Path, extra: dict | None = None) -> None:
    """Write a dataset as a columnar CSV plus a JSON metadata sidecar."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"feature_{j}" for j in range(dataset.dim)] + ["label"])
        for row, label in zip(dataset.features, dataset.labels):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])
    meta = {
        "name": dataset.name,
        "class_count": dataset.class_count,
        "dim": dataset.dim,
        "size": len(dataset),
    }
    if extra:
        meta.update(extra)
    _meta_path(path).write_text(json.dumps(meta, indent=2))


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    meta_file = _meta_path(path)
    if not meta_file.exists():
        raise ValidationError(f"missing metadata sidecar {meta_file}")
    meta = json.loads(meta_file.read_text())
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[-1] != "label":
            raise ValidationError(f"{path}: expected a trailing 'label' column, got {header[-3:]}")
        rows = list(reader)
    features = np.array([[float(v) for v in r[:-1]] for r in rows], dtype=np.float64)
    labels = np.array([int(r[-1]) for r in rows], dtype=np.int64)
    if features.size == 0:
        features = features.reshape(0, len(header) - 1)
    return Dataset(
        name=meta["name"], features=features, labels=labels, class_count=int(meta["class_count"])
    )


def load_cifar10_dir(path: str | Path, max_per_class: int | None = None) -> Dataset:
    """Ingest a local CIFAR-10 python-format directory (data_batch_1..5).

    Pixels are flattened to a 3072-dim float vector in [0, 1]; labels become
    1..10. ``max_per_class`` subsamples deterministically (first occurrences)
    to keep desk-scale memory bounded. No downloading is attempted.
    """
    path = Path(path)
    batch_files = sorted(path.glob("data_batch_*"))
    if not batch_files:
        raise ValidationError(f"no data_batch_* files found under {path}")
    feats, labs = [], []
    for bf in batch_files:
        with open(bf, "rb") as fh:
            raw = pickle.load(fh, encoding="bytes")
        feats.append(np.asarray(raw[b"data"], dtype=np.float64) / 255.0)
        labs.append(np.asarray(raw[b"labels"], dtype=np.int64) + 1)
    features = np.vstack(feats)
    labels = np.concatenate(labs)
    if max_per_class is not None:
        keep: list[np.ndarray] = []
        for c in range(1, 11):
            keep.append(np.flatnonzero(labels == c)[:max_per_class])
        order = np.sort(np.concatenate(keep))
        features, labels = features[order], labels[order]
    return Dataset(name="cifar10", features=features, labels=labels, class_count=10)


def save_split_manifest(split: MismatchSplit, path: str | Path) -> None:
    """Persist the example indices of each partition for bit-exact reruns."""
    manifest = {
        "source_name": split.source_name,
        "seed": split.seed,
        "mismatch_ratio": split.mismatch_ratio,
        "seen_class_ids": list(split.seen_class_ids),
        "labeled_indices": split.labeled_indices.tolist(),
        "unlabeled_indices": split.unlabeled_indices.tolist(),
        "test_indices": split.test_indices.tolist(),
    }
    Path(path).write_text(json.dumps(manifest, indent=2))


def load_split_manifest(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())


def materialize_split(dataset: Dataset, manifest: dict) -> MismatchSplit:
    """Rebuild a split from a manifest, byte-identical to the original."""
    seen = tuple(int(c) for c in manifest["seen_class_ids"])
    remap = {orig: i + 1 for i, orig in enumerate(seen)}
    relabel = np.vectorize(remap.get, otypes=[np.int64])
    labeled_idx = np.asarray(manifest["labeled_indices"], dtype=np.int64)
    unlabeled_idx = np.asarray(manifest["unlabeled_indices"], dtype=np.int64)
    test_idx = np.asarray(manifest["test_indices"], dtype=np.int64)
    return MismatchSplit(
        labeled_x=dataset.features[labeled_idx].copy(),
        labeled_y=relabel(dataset.labels[labeled_idx]),
        unlabeled_x=dataset.features[unlabeled_idx].copy(),
        unlabeled_is_unseen=~np.isin(dataset.labels[unlabeled_idx], seen),
        test_x=dataset.features[test_idx].copy(),
        test_y=relabel(dataset.labels[test_idx]),
        seen_class_ids=seen,
        mismatch_ratio=float(manifest["mismatch_ratio"]),
        labeled_indices=labeled_idx,
        unlabeled_indices=unlabeled_idx,
        test_indices=test_idx,
        source_name=manifest.get("source_name", dataset.name),
        seed=int(manifest.get("seed", 0)),
    )

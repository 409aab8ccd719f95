"""Hard-view selection: keep, per object, the views farthest from their class center."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, LoadError, UsageError

MODES = ("clustering", "random")


@dataclass(frozen=True)
class SelectionConfig:
    top_k: int = 3
    group_size: int = 3
    mode: str = "clustering"
    extractor: str = "downsample"

    def __post_init__(self):
        if self.group_size < 1:
            raise ConfigurationError(f"group_size must be >= 1, got {self.group_size}")
        if self.top_k < self.group_size:
            raise ConfigurationError(f"top_k ({self.top_k}) must be >= group_size ({self.group_size})")
        if self.mode not in MODES:
            raise ConfigurationError(f"selection mode must be one of {MODES}, got {self.mode!r}")


@dataclass
class FeatureMatrix:
    features: np.ndarray  # (n, d)
    view_ids: np.ndarray  # (n,)
    object_ids: list  # n strings
    labels: np.ndarray  # (n,)

    def class_counts(self) -> dict:
        values, counts = np.unique(self.labels, return_counts=True)
        return dict(zip(values.tolist(), counts.tolist()))

    def rows_of(self, object_id: str) -> np.ndarray:
        rows = np.array([i for i, o in enumerate(self.object_ids) if o == object_id], dtype=np.int64)
        if rows.size == 0:
            raise UsageError(f"unknown object {object_id!r}")
        return rows


@dataclass(frozen=True)
class ViewGroup:
    object_id: str
    label: int
    view_ids: tuple
    distances: tuple = ()


class DownsampleExtractor:
    """Block-average each view to at most ``size`` x ``size`` and flatten."""

    def __init__(self, size: int = 16):
        self.size = size

    def __call__(self, images: np.ndarray) -> np.ndarray:
        n, h, w = images.shape
        th, tw = min(self.size, h), min(self.size, w)
        x = images.astype(np.float64) / 255.0
        if (th, tw) != (h, w):
            if h % th or w % tw:
                rows = (np.arange(th) * h) // th
                cols = (np.arange(tw) * w) // tw
                x = x[:, rows][:, :, cols]
            else:
                x = x.reshape(n, th, h // th, tw, w // tw).mean(axis=(2, 4))
        return x.reshape(n, -1)


class EmbeddingExtractor:
    """Per-view embeddings from a network, each view treated as its own group."""

    def __init__(self, weights):
        from .network import ModelWeights, NetworkConfig

        cfg = weights.config
        single = NetworkConfig(**{**cfg.__dict__, "views_per_group": 1})
        self.weights = ModelWeights(single, weights.params)

    def __call__(self, images: np.ndarray) -> np.ndarray:
        from .dataset import to_network_input
        from .network import embed

        cfg = self.weights.config
        x = to_network_input(images, cfg.input_size[:2], cfg.dtype)
        return embed(self.weights, x).astype(np.float64)


def extract_features(objects, extractor) -> FeatureMatrix:
    if not objects:
        raise UsageError("cannot extract features from an empty dataset")
    feats, view_ids, object_ids, labels = [], [], [], []
    for obj in objects:
        try:
            f = extractor(obj.views)
        except Exception as exc:
            raise LoadError(f"feature extraction failed for {obj.object_id}: {exc}") from exc
        if len(f) != obj.num_views:
            raise LoadError(f"{obj.object_id}: extractor returned {len(f)} rows for {obj.num_views} views")
        feats.append(np.asarray(f, dtype=np.float64))
        view_ids.extend(obj.view_ids)
        object_ids.extend([obj.object_id] * obj.num_views)
        labels.extend([obj.label] * obj.num_views)
    return FeatureMatrix(np.concatenate(feats), np.array(view_ids), object_ids, np.array(labels))


def class_centers(fm: FeatureMatrix, num_classes: int | None = None) -> dict:
    """Mean feature vector of each class."""
    present = sorted(set(fm.labels.tolist()))
    if num_classes is not None:
        missing = sorted(set(range(num_classes)) - set(present))
        if missing:
            raise ConfigurationError(f"classes with no samples: {missing}")
    return {c: fm.features[fm.labels == c].mean(axis=0) for c in present}


def rank_views(fm: FeatureMatrix, centers: dict, object_id: str) -> list:
    """(view_id, squared distance) of an object's views, farthest first, ties by view id."""
    rows = fm.rows_of(object_id)
    label = int(fm.labels[rows[0]])
    diff = fm.features[rows] - centers[label]
    dist = np.einsum("ij,ij->i", diff, diff)
    vids = fm.view_ids[rows]
    order = np.lexsort((vids, -dist))
    return [(int(vids[i]), float(dist[i])) for i in order]


def select_groups(fm: FeatureMatrix, centers: dict, config: SelectionConfig, seed: int = 0) -> list:
    """One ViewGroup per object.

    Clustering mode keeps the ``group_size`` farthest views when
    ``top_k == group_size``; a larger ``top_k`` draws the group at random
    (seeded) from the ``top_k`` farthest, preserving their rank order.
    Random mode draws ``group_size`` views uniformly.
    """
    rng = np.random.default_rng(seed)
    groups = []
    for object_id in dict.fromkeys(fm.object_ids):
        ranked = rank_views(fm, centers, object_id)
        label = int(fm.labels[fm.rows_of(object_id)[0]])
        if len(ranked) < config.group_size:
            raise UsageError(f"{object_id} has {len(ranked)} views, fewer than group size {config.group_size}")
        if config.mode == "random":
            picks = rng.choice(len(ranked), config.group_size, replace=False)
            chosen = sorted((ranked[i] for i in picks), key=lambda r: r[0])
        elif config.top_k == config.group_size:
            chosen = ranked[: config.group_size]
        else:
            pool = min(config.top_k, len(ranked))
            picks = np.sort(rng.choice(pool, config.group_size, replace=False))
            chosen = [ranked[i] for i in picks]
        groups.append(ViewGroup(object_id, label, tuple(v for v, _ in chosen), tuple(d for _, d in chosen)))
    return groups


def write_manifest(path, groups, header: str = "") -> None:
    lines = [f"# {header}"] if header else []
    lines.append("# object\tclass\tviews\tdistances2")
    for g in groups:
        views = ",".join(str(v) for v in g.view_ids)
        dists = ",".join(repr(float(d)) for d in g.distances)
        lines.append(f"{g.object_id}\t{g.label}\t{views}\t{dists}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> list:
    groups = []
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise LoadError(f"{path}:{n}: expected 4 tab-separated fields")
        dists = tuple(float(d) for d in parts[3].split(",")) if parts[3] else ()
        groups.append(ViewGroup(parts[0], int(parts[1]), tuple(int(v) for v in parts[2].split(",")), dists))
    return groups

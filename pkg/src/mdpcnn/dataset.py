"""Multi-view corpora on disk: PGM loading, per-object view split, synthetic generator."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, LoadError, UsageError

SHAPES = ("disk", "square", "triangle", "cross", "ring", "bar", "lshape", "diamond")


@dataclass
class MultiViewObject:
    object_id: str
    label: int
    class_name: str
    views: np.ndarray  # (V, H, W) uint8
    view_ids: tuple = ()

    def __post_init__(self):
        if not self.view_ids:
            self.view_ids = tuple(range(len(self.views)))
        if len(self.view_ids) != len(self.views):
            raise ConfigurationError(f"{self.object_id}: {len(self.views)} views but {len(self.view_ids)} ids")

    @property
    def num_views(self) -> int:
        return len(self.views)

    def view(self, view_id: int) -> np.ndarray:
        try:
            return self.views[self.view_ids.index(view_id)]
        except ValueError:
            raise UsageError(f"{self.object_id} has no view {view_id}") from None

    def subset(self, view_ids) -> "MultiViewObject":
        view_ids = tuple(int(v) for v in view_ids)
        return MultiViewObject(
            self.object_id, self.label, self.class_name, np.stack([self.view(v) for v in view_ids]), view_ids
        )


# ---------------------------------------------------------------------------
# PGM (binary P5, 8-bit)


def write_pgm(path, image: np.ndarray) -> None:
    img = np.asarray(image, dtype=np.uint8)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_pgm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise LoadError(f"{path}: truncated PGM header")
        tokens.append(blob[start:pos])
    pos += 1  # single whitespace after maxval
    if tokens[0] != b"P5":
        raise LoadError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise LoadError(f"{path}: only 8-bit PGM supported (maxval {maxval})")
    data = blob[pos:pos + w * h]
    if len(data) != w * h:
        raise LoadError(f"{path}: expected {w * h} pixel bytes, found {len(data)}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()


# ---------------------------------------------------------------------------
# corpus


def load_corpus(root) -> list:
    """Read ``root/<class>/<object>/<view_index>.pgm`` into objects.

    Classes are labelled by sorted directory name; views are ordered by
    numeric index, which must run 0..V-1 without gaps.
    """
    root = Path(root)
    if not root.is_dir():
        raise LoadError(f"corpus root {root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise LoadError(f"corpus root {root} has no class directories")
    objects = []
    shape = None
    for label, cdir in enumerate(class_dirs):
        obj_dirs = sorted(p for p in cdir.iterdir() if p.is_dir())
        if not obj_dirs:
            raise LoadError(f"class directory {cdir} is empty")
        for odir in obj_dirs:
            object_id = f"{cdir.name}/{odir.name}"
            files = {}
            for f in odir.glob("*.pgm"):
                try:
                    files[int(f.stem)] = f
                except ValueError:
                    raise LoadError(f"{object_id}: view file {f.name} is not numbered") from None
            if not files:
                raise LoadError(f"{object_id}: no views")
            if sorted(files) != list(range(len(files))):
                missing = sorted(set(range(max(files) + 1)) - set(files))
                raise LoadError(f"{object_id}: view indices not contiguous, missing {missing}")
            views = np.stack([read_pgm(files[i]) for i in range(len(files))])
            if shape is None:
                shape = views.shape[1:]
            elif views.shape[1:] != shape:
                raise LoadError(f"{object_id}: view size {views.shape[1:]} differs from corpus size {shape}")
            objects.append(MultiViewObject(object_id, label, cdir.name, views))
    return objects


def num_train_views(total: int, train_fraction: float = 0.8) -> int:
    return math.floor(Fraction(str(train_fraction)) * total)


def split(objects, train_fraction: float = 0.8) -> tuple:
    """First ``floor(fraction * V)`` views of each object train, the rest test."""
    if not 0 < train_fraction < 1:
        raise ConfigurationError(f"train fraction must be in (0, 1), got {train_fraction}")
    train, test = [], []
    for obj in objects:
        n_train = num_train_views(obj.num_views, train_fraction)
        if n_train < 1 or n_train >= obj.num_views:
            raise UsageError(
                f"{obj.object_id}: {obj.num_views} views leave an empty side at fraction {train_fraction}"
            )
        train.append(obj.subset(obj.view_ids[:n_train]))
        test.append(obj.subset(obj.view_ids[n_train:]))
    return train, test


def to_network_input(images: np.ndarray, size: tuple, dtype="float32") -> np.ndarray:
    """uint8 (N, H, W) -> (N, 1, h, w) in [0, 1], block-averaged when shrinking by an integer factor."""
    n, h, w = images.shape
    th, tw = size
    x = images.astype(np.float64) / 255.0
    if (h, w) != (th, tw):
        if h % th or w % tw:
            raise ConfigurationError(f"cannot resize {(h, w)} views to {(th, tw)}: not an integer factor")
        x = x.reshape(n, th, h // th, tw, w // tw).mean(axis=(2, 4))
    return x[:, None].astype(dtype)


# ---------------------------------------------------------------------------
# synthetic generator


def _inside(shape: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Membership mask in the shape's own frame (unit radius ~1)."""
    au, av = np.abs(u), np.abs(v)
    if shape == "disk":
        return u * u + v * v <= 1.0
    if shape == "square":
        return np.maximum(au, av) <= 0.8
    if shape == "triangle":
        # equilateral, circumradius 1, apex up
        return (v >= -0.5) & (np.sqrt(3) * u + v <= 1.0) & (-np.sqrt(3) * u + v <= 1.0)
    if shape == "cross":
        return ((au <= 0.3) & (av <= 1.0)) | ((av <= 0.3) & (au <= 1.0))
    if shape == "ring":
        r2 = u * u + v * v
        return (r2 <= 1.0) & (r2 >= 0.45)
    if shape == "bar":
        return (au <= 1.0) & (av <= 0.3)
    if shape == "lshape":
        return ((u >= -0.8) & (u <= -0.2) & (av <= 0.9)) | ((v >= 0.3) & (v <= 0.9) & (u >= -0.8) & (u <= 0.8))
    if shape == "diamond":
        # elongated rhombus, not a rotated square
        return au / 1.0 + av / 0.55 <= 1.0
    raise ConfigurationError(f"unknown shape {shape}")


def render_view(shape: str, size: int, angle: float, scale: float, offset: tuple, supersample: int = 2) -> np.ndarray:
    """Anti-aliased rendering of ``shape`` rotated by ``angle``; float image in [0, 1]."""
    s = size * supersample
    coords = (np.arange(s) + 0.5) / s * 2.0 - 1.0
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    px = (xx - offset[0]) / scale
    py = (-(yy - offset[1])) / scale
    ca, sa = np.cos(angle), np.sin(angle)
    u = ca * px + sa * py
    v = -sa * px + ca * py
    mask = _inside(shape, u, v).astype(np.float64)
    return mask.reshape(size, supersample, size, supersample).mean(axis=(1, 3))


def synth_generate(
    root,
    num_classes: int = 8,
    objects_per_class: int = 10,
    views_per_object: int = 20,
    image_size: int = 64,
    seed: int = 0,
    noise: float = 0.04,
    phase_jitter: float = 0.0,
) -> Path:
    """Write a rotated-shape corpus to ``root`` and return the path.

    Each class is one parametric shape (cycled through ``SHAPES``); each
    object jitters scale and position; views are evenly spaced rotations
    with additive Gaussian pixel noise. View ``i`` of every object sits at
    the same angle unless ``phase_jitter`` (radians) randomises the start.
    """
    if min(num_classes, objects_per_class, views_per_object) < 1:
        raise ConfigurationError("synthetic corpus counts must all be >= 1")
    if image_size < 16:
        raise ConfigurationError(f"image size {image_size} too small for the shapes (need >= 16)")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    lines = [f"seed = {seed}", f"image_size = {image_size}", "# class object views"]
    for c in range(num_classes):
        shape = SHAPES[c % len(SHAPES)]
        cname = f"c{c:02d}_{shape}"
        for o in range(objects_per_class):
            oname = f"o{o:03d}"
            odir = root / cname / oname
            odir.mkdir(parents=True, exist_ok=True)
            scale = rng.uniform(0.45, 0.65)
            offset = tuple(rng.uniform(-0.12, 0.12, size=2))
            phase = rng.uniform(0, phase_jitter) if phase_jitter else 0.0
            for vi in range(views_per_object):
                angle = phase + 2 * np.pi * vi / views_per_object
                img = render_view(shape, image_size, angle, scale, offset)
                img = 0.1 + 0.8 * img + rng.normal(0.0, noise, img.shape)
                write_pgm(odir / f"{vi:03d}.pgm", np.clip(np.rint(img * 255), 0, 255).astype(np.uint8))
            lines.append(f"{cname} {oname} {views_per_object}")
    (root / "manifest.txt").write_text("\n".join(lines) + "\n")
    return root

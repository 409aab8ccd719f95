"""Group-pair generation and the combinatorics of the pair space."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from math import comb
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, LoadError, UsageError

INT64_MAX = 2**63 - 1


class InfeasibleQuotaError(UsageError):
    """Requested pairs of a kind that the groups cannot produce."""


@dataclass(frozen=True)
class PairQuota:
    num_positive: int = 2000
    num_negative: int = 6000
    seed: int = 0

    def __post_init__(self):
        if self.num_positive < 0 or self.num_negative < 0:
            raise ConfigurationError(f"pair quotas must be >= 0, got {self.num_positive}/{self.num_negative}")

    @classmethod
    def eth(cls, seed: int = 0) -> "PairQuota":
        return cls(10_000, 30_000, seed)


@dataclass(frozen=True)
class GroupPairRecord:
    object_a: str
    object_b: str
    class_a: int
    class_b: int
    views_a: tuple
    views_b: tuple
    label: int

    def __post_init__(self):
        if self.object_a == self.object_b:
            raise UsageError(f"a pair needs two distinct objects, got {self.object_a} twice")
        if self.label != pair_label(self.class_a, self.class_b):
            raise UsageError(f"label {self.label} inconsistent with classes {self.class_a}, {self.class_b}")


def pair_label(class_a, class_b) -> int:
    return int(class_a == class_b)


def pair_space_size(num_objects: int, views_per_object: int, group_size: int = 3) -> int:
    """Distinct group pairs: C(views, group_size) * C(objects, 2)."""
    if num_objects < 2:
        raise ConfigurationError(f"need at least 2 objects, got {num_objects}")
    if group_size < 1 or views_per_object < group_size:
        raise ConfigurationError(f"views_per_object {views_per_object} < group size {group_size}")
    total = comb(views_per_object, group_size) * comb(num_objects, 2)
    if total > INT64_MAX:
        raise OverflowError(f"pair space {total} exceeds the 64-bit range")
    return total


def _draw(rng: np.random.Generator, n_avail: int, quota: int) -> np.ndarray:
    """Indices: without replacement up to the pool size, then with replacement."""
    if quota <= n_avail:
        return rng.choice(n_avail, quota, replace=False)
    return np.concatenate([rng.permutation(n_avail), rng.integers(0, n_avail, quota - n_avail)])


def generate_pairs(groups, quota: PairQuota) -> list:
    """Sample positive and negative group pairs over distinct object pairs."""
    if len(groups) < 2:
        raise UsageError(f"need at least 2 groups, got {len(groups)}")
    pos, neg = [], []
    for i in range(len(groups)):
        for j in range(i + 1, len(groups)):
            (pos if groups[i].label == groups[j].label else neg).append((i, j))
    if quota.num_positive and not pos:
        raise InfeasibleQuotaError("positive pairs requested but no two objects share a class")
    if quota.num_negative and not neg:
        raise InfeasibleQuotaError("negative pairs requested but all objects share one class")

    rng = np.random.default_rng(quota.seed)
    chosen = [pos[k] for k in _draw(rng, len(pos), quota.num_positive)]
    chosen += [neg[k] for k in _draw(rng, len(neg), quota.num_negative)]
    order = rng.permutation(len(chosen))
    swap = rng.random(len(chosen)) < 0.5
    records = []
    for k in order:
        i, j = chosen[k]
        if swap[k]:
            i, j = j, i
        a, b = groups[i], groups[j]
        records.append(
            GroupPairRecord(a.object_id, b.object_id, a.label, b.label, a.view_ids, b.view_ids, pair_label(a.label, b.label))
        )
    return records


def write_manifest(path, records, quota: PairQuota) -> None:
    buf = io.StringIO()
    buf.write(f"# num_positive={quota.num_positive} num_negative={quota.num_negative} seed={quota.seed}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["objA", "objB", "classA", "classB", "viewsA", "viewsB", "y"])
    for r in records:
        w.writerow([
            r.object_a, r.object_b, r.class_a, r.class_b,
            ";".join(map(str, r.views_a)), ";".join(map(str, r.views_b)), r.label,
        ])
    Path(path).write_text(buf.getvalue())


def read_manifest(path) -> list:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("#"):
        raise LoadError(f"{path}: missing quota header line")
    records = []
    reader = csv.DictReader(lines[1:])
    for row in reader:
        try:
            records.append(GroupPairRecord(
                row["objA"], row["objB"], int(row["classA"]), int(row["classB"]),
                tuple(int(v) for v in row["viewsA"].split(";")),
                tuple(int(v) for v in row["viewsB"].split(";")),
                int(row["y"]),
            ))
        except (KeyError, ValueError, TypeError) as exc:
            raise LoadError(f"{path}: bad pair row {row}: {exc}") from exc
    return records

"""Retrieval ranking and metrics: NN, FT, ST, F, DCG, ANMRR, mAP and PR curves.

Every metric takes a list of ``RankedRetrieval`` and returns the mean over
queries. Queries without any relevant gallery item are skipped by every
metric except NN (their count is reported separately).
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import to_network_input
from .errors import UsageError
from .network import ModelWeights, embed

TOP_K = 10
RECALL_LEVELS = np.round(np.arange(1, 21) * 0.05, 10)
METRIC_NAMES = ("nn", "ft", "st", "f_measure", "dcg", "anmrr", "map")


@dataclass
class RankedRetrieval:
    query_id: str
    query_label: int
    gallery_ids: list
    distances: np.ndarray
    relevant: np.ndarray  # bool, aligned with gallery_ids

    @property
    def num_relevant(self) -> int:
        return int(self.relevant.sum())


@dataclass
class MetricReport:
    nn: float
    ft: float
    st: float
    f_measure: float
    dcg: float
    anmrr: float
    map: float
    pr_curve: list
    repeats: int = 1
    std: dict = field(default_factory=dict)
    excluded_queries: int = 0

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in METRIC_NAMES}

    def to_text(self) -> str:
        lines = [f"repeats = {self.repeats}", f"excluded_queries = {self.excluded_queries}"]
        for k in METRIC_NAMES:
            lines.append(f"{k} = {getattr(self, k)!r} {self.std.get(k, 0.0)!r}")
        return "\n".join(lines) + "\n"

    def pr_csv(self) -> str:
        buf = io.StringIO()
        buf.write("recall,precision\n")
        for r, p in self.pr_curve:
            buf.write(f"{r!r},{p!r}\n")
        return buf.getvalue()

    def write(self, report_path, pr_path) -> None:
        Path(report_path).write_text(self.to_text())
        Path(pr_path).write_text(self.pr_csv())


# ---------------------------------------------------------------------------
# ranking


def rank_gallery(query_id, query_label, query_emb, gallery_ids, gallery_labels, gallery_embs) -> RankedRetrieval:
    keep = [i for i, g in enumerate(gallery_ids) if g != query_id]
    if not keep:
        raise UsageError(f"empty gallery for query {query_id}")
    ids = np.array([gallery_ids[i] for i in keep])
    labels = np.asarray(gallery_labels)[keep]
    diff = np.asarray(gallery_embs, dtype=np.float64)[keep] - np.asarray(query_emb, dtype=np.float64)
    dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    order = np.lexsort((ids, dist))
    return RankedRetrieval(query_id, int(query_label), ids[order].tolist(), dist[order], labels[order] == query_label)


def rank_all(ids, labels, embs) -> list:
    """Leave-one-out ranking: every object queries all the others."""
    return [rank_gallery(q, labels[i], embs[i], ids, labels, embs) for i, q in enumerate(ids)]


def embed_and_rank(weights: ModelWeights, queries, gallery) -> list:
    """Embed (object_id, label, views uint8 (V, H, W)) groups and rank the gallery for each query."""
    if not gallery:
        raise UsageError("gallery is empty")
    q_embs = _embed_groups(weights, [g[2] for g in queries])
    g_embs = _embed_groups(weights, [g[2] for g in gallery])
    g_ids = [g[0] for g in gallery]
    g_labels = np.array([g[1] for g in gallery])
    return [rank_gallery(q[0], q[1], e, g_ids, g_labels, g_embs) for q, e in zip(queries, q_embs)]


def _embed_groups(weights: ModelWeights, groups) -> np.ndarray:
    cfg = weights.config
    views = np.concatenate([np.asarray(g) for g in groups])
    return embed(weights, to_network_input(views, cfg.input_size[:2], cfg.dtype)).astype(np.float64)


# ---------------------------------------------------------------------------
# metrics


def _with_relevant(rankings) -> list:
    return [r for r in rankings if r.num_relevant > 0]


def _mean(values) -> float:
    values = list(values)
    return float(np.mean(values)) if values else 0.0


def metric_nn(rankings) -> float:
    return _mean(float(r.relevant[0]) for r in rankings)


def _tier(r: RankedRetrieval, mult: int) -> float:
    n_rel = r.num_relevant
    return float(r.relevant[: mult * n_rel].sum()) / n_rel


def metric_ft(rankings) -> float:
    return _mean(_tier(r, 1) for r in _with_relevant(rankings))


def metric_st(rankings) -> float:
    return _mean(_tier(r, 2) for r in _with_relevant(rankings))


def metric_f(rankings, k: int = TOP_K) -> float:
    """F-measure of precision/recall over the top ``k`` (or the whole list if shorter)."""
    scores = []
    for r in _with_relevant(rankings):
        cut = min(k, len(r.relevant))
        hits = float(r.relevant[:cut].sum())
        p, rec = hits / cut, hits / r.num_relevant
        scores.append(0.0 if p + rec == 0 else 2 * p * rec / (p + rec))
    return _mean(scores)


def _discount(n: int) -> np.ndarray:
    d = np.ones(n)
    if n > 1:
        d[1:] = 1.0 / np.log2(np.arange(2, n + 1))
    return d


def metric_dcg(rankings) -> float:
    scores = []
    for r in _with_relevant(rankings):
        disc = _discount(len(r.relevant))
        scores.append(float(disc[r.relevant].sum() / disc[: r.num_relevant].sum()))
    return _mean(scores)


def nmrr_scores(rankings) -> list:
    """Per-query NMRR with the missed-item penalty of 1.25 K."""
    valid = _with_relevant(rankings)
    if not valid:
        return []
    gtm = max(r.num_relevant for r in valid)
    out = []
    for r in valid:
        ng = r.num_relevant
        k = min(4 * ng, 2 * gtm)
        ranks = np.flatnonzero(r.relevant) + 1.0
        ranks = np.where(ranks <= k, ranks, 1.25 * k)
        avr = ranks.sum() / ng
        mrr = avr - 0.5 - ng / 2
        out.append(float(mrr / (1.25 * k - 0.5 - ng / 2)))
    return out


def metric_anmrr(rankings) -> float:
    return _mean(nmrr_scores(rankings))


def average_precision(r: RankedRetrieval) -> float:
    pos = np.flatnonzero(r.relevant)
    return float(np.mean(np.arange(1, len(pos) + 1) / (pos + 1)))


def metric_map(rankings) -> float:
    return _mean(average_precision(r) for r in _with_relevant(rankings))


def pr_curve(rankings) -> list:
    """Interpolated precision at recall 0.05, 0.10, ..., 1.0, averaged over queries."""
    valid = _with_relevant(rankings)
    if not valid:
        raise UsageError("PR curve needs at least one query with relevant items")
    total = np.zeros(len(RECALL_LEVELS))
    for r in valid:
        hits = np.cumsum(r.relevant)
        precision = hits / np.arange(1, len(hits) + 1)
        recall = hits / r.num_relevant
        # best precision at any cutoff reaching each recall level
        best_from = np.maximum.accumulate(precision[::-1])[::-1]
        first = np.searchsorted(recall, RECALL_LEVELS - 1e-12, side="left")
        total += best_from[first]
    return [(float(lvl), float(p)) for lvl, p in zip(RECALL_LEVELS, total / len(valid))]


def evaluate(rankings) -> MetricReport:
    return MetricReport(
        nn=metric_nn(rankings),
        ft=metric_ft(rankings),
        st=metric_st(rankings),
        f_measure=metric_f(rankings),
        dcg=metric_dcg(rankings),
        anmrr=metric_anmrr(rankings),
        map=metric_map(rankings),
        pr_curve=pr_curve(rankings),
        excluded_queries=sum(1 for r in rankings if r.num_relevant == 0),
    )


def repeat_protocol(weights: ModelWeights, test_objects, runs: int = 10, seed: int = 0, group_size: int | None = None) -> MetricReport:
    """Average metrics over ``runs`` random draws of one test group per object.

    Each run picks ``group_size`` random test views per object; every object
    then queries all the other objects.
    """
    if runs < 1:
        raise UsageError(f"runs must be >= 1, got {runs}")
    v = group_size or weights.config.views_per_group
    rng = np.random.default_rng(seed)
    ids = [o.object_id for o in test_objects]
    labels = np.array([o.label for o in test_objects])
    reports = []
    for _ in range(runs):
        groups = []
        for obj in test_objects:
            if obj.num_views < v:
                raise UsageError(f"{obj.object_id} has {obj.num_views} test views, need {v}")
            groups.append(obj.views[rng.choice(obj.num_views, v, replace=False)])
        embs = _embed_groups(weights, groups)
        reports.append(evaluate(rank_all(ids, labels, embs)))

    values = {k: np.array([getattr(r, k) for r in reports]) for k in METRIC_NAMES}
    curve = np.mean([[p for _, p in r.pr_curve] for r in reports], axis=0)
    return MetricReport(
        **{k: float(values[k].mean()) for k in METRIC_NAMES},
        pr_curve=[(float(lvl), float(p)) for lvl, p in zip(RECALL_LEVELS, curve)],
        repeats=runs,
        std={k: float(values[k].std()) for k in METRIC_NAMES},
        excluded_queries=reports[0].excluded_queries,
    )

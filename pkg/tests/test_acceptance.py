"""Acceptance suite: one test per criterion, each registering a PASS/FAIL line.

The synthetic experiments (criteria 6-8) train the desk-scale network for
9 epochs per run; the whole module takes on the order of an hour on one core.
"""

import filecmp
import time
from dataclasses import replace
from math import comb

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from mdpcnn import cli
from mdpcnn.core import (
    Tensor,
    concat_batch,
    conv2d,
    fully_connected,
    grad_check,
    half_sq_norm,
    maxpool2d,
    relu,
    slice_batch,
    view_pool,
)
from mdpcnn.dataset import load_corpus, split, synth_generate
from mdpcnn.evaluation import METRIC_NAMES, RankedRetrieval, evaluate
from mdpcnn.experiment import DESK_NETWORK, ExperimentConfig, run
from mdpcnn.losses import LossConfig, contrastive_center_loss, contrastive_loss, discrimination_loss
from mdpcnn.network import GroupPairBatch, build, forward_chain, forward_pair
from mdpcnn.pairgen import PairQuota, generate_pairs, pair_space_size
from mdpcnn.trainer import TrainConfig, train

import oracles

RUN_SEEDS = (0, 1, 2, 3, 4)
E2E_SEEDS = (0, 1, 2)
MODES = ("only_batch", "batch_plus_selection", "all")


def record(n, ok, detail):
    ACCEPTANCE_LINES[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(ACCEPTANCE_LINES[n])
    assert ok, detail


def leaf(shape, rng, scale=1.0):
    return Tensor(rng.normal(size=shape) * scale, requires_grad=True)


# ---------------------------------------------------------------------------
# shared synthetic runs


@pytest.fixture(scope="module")
def synth_objects(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    synth_generate(root, num_classes=8, objects_per_class=10, views_per_object=20, image_size=64, seed=0)
    return load_corpus(root)


class Runs:
    def __init__(self, objects):
        self.objects = objects
        self.cache = {}

    def get(self, mode, seed):
        if (mode, seed) not in self.cache:
            self.cache[(mode, seed)] = run(self.objects, ExperimentConfig.ablation(mode, seed=seed))
        return self.cache[(mode, seed)]


@pytest.fixture(scope="module")
def runs(synth_objects):
    return Runs(synth_objects)


# ---------------------------------------------------------------------------


def test_c1_pair_space_totals():
    start = time.perf_counter()
    got = [
        pair_space_size(80, 41, 3),
        pair_space_size(549, 48, 3),
        pair_space_size(505, 28, 3),
        pair_space_size(3183, 12, 3),
    ]
    elapsed = time.perf_counter() - start
    want = [33_685_600, 2_601_768_096, 416_903_760, 1_114_113_660]
    # the ETH reference total needs 41 views; 32 views give 15,673,600
    eth32 = pair_space_size(80, 32, 3)
    ok = got == want and eth32 == comb(32, 3) * comb(80, 2) == 15_673_600 and elapsed < 1e-3
    record(1, ok, f"totals {got}, ETH at 32 views {eth32:,}, {elapsed * 1e3:.3f} ms")


def test_c2_gradient_suite():
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    per_op = {}

    x, w, b = leaf((2, 2, 6, 6), rng), leaf((3, 2, 3, 3), rng), leaf((3,), rng)
    per_op["conv2d"] = grad_check(lambda: half_sq_norm(conv2d(x, w, b, pad=1)), [x, w, b], probes=20)

    xr = Tensor(rng.uniform(0.1, 1.0, 40) * rng.choice([-1, 1], 40), requires_grad=True)
    per_op["relu"] = grad_check(lambda: half_sq_norm(relu(xr)), [xr], eps=1e-5, probes=20)

    xp = Tensor(rng.permutation(144).reshape(1, 1, 12, 12) / 10.0, requires_grad=True)
    per_op["maxpool2d"] = grad_check(lambda: half_sq_norm(maxpool2d(xp)), [xp], probes=20)

    xf, wf, bf = leaf((4, 6), rng), leaf((6, 3), rng), leaf((3,), rng)
    per_op["fully_connected"] = grad_check(lambda: half_sq_norm(fully_connected(xf, wf, bf)), [xf, wf, bf], probes=20)

    xs = leaf((6, 2, 3, 3), rng)
    per_op["slice/concat"] = grad_check(lambda: half_sq_norm(concat_batch(slice_batch(xs, [1, 2, 3]))), [xs], probes=20)

    xv = leaf((9, 2, 3, 3), rng)
    per_op["view_pool"] = grad_check(lambda: half_sq_norm(view_pool(slice_batch(xv, [3, 3, 3]))), [xv], probes=20)

    a, bb = leaf((10, 4), rng, 0.4), leaf((10, 4), rng, 0.4)
    y = np.array([0, 1] * 5)
    per_op["contrastive"] = grad_check(lambda: contrastive_loss(a, bb, y, 1.0), [a, bb], probes=20)

    e, c = leaf((8, 4), rng), leaf((3, 4), rng)
    lab = rng.integers(0, 3, 8)
    per_op["contrastive_center"] = grad_check(lambda: contrastive_center_loss(e, lab, c, 1.0), [e, c], probes=20)

    cfg = replace(DESK_NETWORK, dtype="float64")
    weights = build(cfg, 0)
    weights.centers.data[...] = rng.normal(size=weights.centers.shape)
    h, wd, k = cfg.input_size
    va, vb = rng.random((6, k, h, wd)), rng.random((6, k, h, wd))
    la, lb = np.array([0, 3]), np.array([0, 5])
    pair = (la == lb).astype(int)
    loss_cfg = LossConfig(num_classes=cfg.num_classes)

    def full():
        ea = forward_chain(weights, Tensor(va))
        eb = forward_chain(weights, Tensor(vb))
        return discrimination_loss(ea, eb, la, lb, pair, loss_cfg, weights.centers)

    stats = {}
    full_err = grad_check(full, weights.parameters(), eps=1e-6, probes=20, stats=stats)
    elapsed = time.perf_counter() - start

    worst_op = max(per_op, key=per_op.get)
    ok = max(per_op.values()) <= 1e-6 and full_err <= 1e-4 and elapsed < 120
    record(2, ok, f"worst op {worst_op} {per_op[worst_op]:.2e}, full graph {full_err:.2e} "
                  f"({stats['checked']} probes, {stats['skipped']} kink skips), {elapsed:.0f} s")


def test_c3_loss_identities():
    hand = float(contrastive_loss(Tensor([[1.0, 0.0]]), Tensor([[0.0, 0.0]]), [1], 1.0).data)
    boundary = float(contrastive_loss(Tensor([[1.0, 0.0]]), Tensor([[0.0, 0.0]]), [0], 1.0).data)
    center = float(contrastive_center_loss(Tensor([[1.0, 0.0]]), [0], Tensor([[0.0, 0.0], [2.0, 0.0]]), 1.0).data)
    # a pair at squared distance 1 whose members both give 0.25 against the same two centers
    a, b = Tensor([[0.0, 0.0, 0.0, 0.0]]), Tensor([[1.0, 0.0, 0.0, 0.0]])
    centers = Tensor([[0.5, 0.5, 0.5, 0.5], [0.5, -0.5, -0.5, -0.5]])
    combined = float(discrimination_loss(a, b, [0], [0], [1], LossConfig(0.99, 0.01, num_classes=2), centers).data)
    ok = abs(hand - 0.5) <= 1e-12 and abs(boundary) <= 1e-12 and abs(center - 0.25) <= 1e-12 and abs(combined - 0.5) <= 1e-12
    record(3, ok, f"contrastive {hand}, at margin {boundary}, center {center}, combined {combined}")


def test_c4_structural_invariants():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(18, 4, 5, 5)).astype(np.float32)
    round_trip = concat_batch(slice_batch(Tensor(x), [3] * 6)).data.tobytes() == x.tobytes()

    views = [rng.normal(size=(2, 4, 3, 3)) for _ in range(5)]
    ref = view_pool([Tensor(v) for v in views]).data.tobytes()
    perm_ok = all(
        view_pool([Tensor(views[i]) for i in rng.permutation(5)]).data.tobytes() == ref for _ in range(100)
    )

    weights = build(DESK_NETWORK, 0)
    h, w, k = DESK_NETWORK.input_size
    g = rng.random((12, k, h, w)).astype(np.float32)
    labels = np.arange(4)
    ea, eb = forward_pair(weights, GroupPairBatch(g, g.copy(), labels, labels, np.ones(4, dtype=int)))
    shared = ea.data.tobytes() == eb.data.tobytes()
    record(4, round_trip and perm_ok and shared,
           f"slice/concat bit-exact {round_trip}, view_pool 100 permutations {perm_ok}, shared weights {shared}")


def test_c5_metric_oracle():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(200):
        queries = [rng.integers(0, 2, int(rng.integers(1, 9))).tolist() for _ in range(int(rng.integers(1, 5)))]
        if not any(sum(q) for q in queries):
            queries[0][0] = 1
        rankings = [
            RankedRetrieval(f"q{i}", 0, [f"g{j}" for j in range(len(q))], np.arange(len(q), dtype=float), np.array(q, bool))
            for i, q in enumerate(queries)
        ]
        got = evaluate(rankings).as_dict()
        ref = oracles.all_metrics(queries)
        worst = max(worst, max(abs(got[k] - ref[k]) for k in METRIC_NAMES))
    perfect = evaluate([
        RankedRetrieval("q", 0, list("abcde"), np.arange(5.0), np.array([1, 1, 0, 0, 0], bool)),
        RankedRetrieval("r", 1, list("abcde"), np.arange(5.0), np.array([1, 1, 1, 0, 0], bool)),
    ])
    perfect_ok = (perfect.nn, perfect.ft, perfect.st, perfect.dcg, perfect.map, perfect.anmrr) == (1, 1, 1, 1, 1, 0)
    record(5, worst <= 1e-12 and perfect_ok, f"max deviation from oracle {worst:.1e} over 200 instances, perfect retrieval {perfect_ok}")


@pytest.mark.slow
def test_c6_synthetic_end_to_end(runs):
    start = time.perf_counter()
    results = [runs.get("all", s) for s in E2E_SEEDS]
    wall = time.perf_counter() - start
    maps = [r.trained.map for r in results]
    gains = [r.trained.map - r.baseline.map for r in results]
    ok = np.mean(maps) >= 0.85 and np.mean(gains) >= 0.30 and wall <= 15 * 60
    record(6, ok, f"mean mAP {np.mean(maps):.4f} (per seed {[round(m, 4) for m in maps]}), "
                  f"mean gain over untrained {np.mean(gains):.4f}, wall {wall / 60:.1f} min")


@pytest.mark.slow
def test_c7_ablation_ordering(runs):
    means = {m: float(np.mean([runs.get(m, s).trained.map for s in RUN_SEEDS])) for m in MODES}
    ok = means["all"] >= means["batch_plus_selection"] - 0.02 and means["batch_plus_selection"] >= means["only_batch"] - 0.02
    record(7, ok, "mean mAP over 5 seeds " + ", ".join(f"{m} {v:.4f}" for m, v in means.items()))


@pytest.mark.slow
def test_c8_convergence(runs, synth_objects):
    ratios = []
    for (mode, seed), r in sorted(runs.cache.items()):
        loss = np.asarray(r.log.loss)
        ratios.append(float(np.mean(loss[-50:]) / np.mean(loss[:50])))
    if not ratios:
        pytest.skip("no acceptance runs were executed in this session")

    train_objs, _ = split(synth_objects)
    result = runs.get("all", 0)
    pairs = generate_pairs(result.groups, PairQuota(500, 500, seed=0))
    net = replace(DESK_NETWORK, num_classes=8)
    variances = {}
    for bsz in (12, 2):
        cfg = TrainConfig(epochs=3, batch_size=bsz, loss=LossConfig(num_classes=8), seed=0)
        _, log = train(train_objs, pairs, build(replace(net, batch_size=bsz), 0), cfg)
        last = np.asarray(log.loss)[np.asarray(log.epoch) == cfg.epochs - 1]
        variances[bsz] = float(np.var(last))
    ok = max(ratios) < 0.6 and variances[12] < variances[2]
    record(8, ok, f"end/start loss ratio max {max(ratios):.3f} over {len(ratios)} runs, "
                  f"final-epoch loss variance B=12 {variances[12]:.2e} vs B=2 {variances[2]:.2e}")


def test_c9_cli_determinism(tmp_path):
    small = [
        "--set", "network.conv_channels=4,8,8,16,16", "--set", "network.input_size=32,32,1",
        "--set", "network.fc1_width=32", "--set", "network.embedding_dim=16",
        "--set", "pairgen.num_positive=40", "--set", "pairgen.num_negative=80",
        "--set", "trainer.epochs=2", "--set", "eval.runs=3",
        "--set", "gradcheck.probes=1",
    ]
    synth = ["--set", "synth.objects_per_class=4", "--set", "synth.views_per_object=20"]

    def pipeline(out):
        assert cli.main(["synth", "--out", str(out / "corpus"), "--seed", "7", *synth]) == 0
        common = ["--out", str(out), "--seed", "7", "--set", f"paths.corpus={out / 'corpus'}", *small]
        for stage in ("select", "pairgen", "train", "eval", "gradcheck"):
            assert cli.main([stage, *common]) == 0
        return out

    a, b = pipeline(tmp_path / "a"), pipeline(tmp_path / "b")
    artifacts = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file() and not p.name.endswith(".config.txt"))
    same = [filecmp.cmp(a / p, b / p, shallow=False) for p in artifacts]
    expected = {"selection.txt", "pairs.csv", "weights.mdpw", "trainlog.csv", "report.txt", "pr.csv", "gradcheck.txt"}
    ok = all(same) and expected <= {p.name for p in artifacts}
    record(9, ok, f"{sum(same)}/{len(same)} artifacts byte-identical across reruns")

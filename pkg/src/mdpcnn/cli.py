"""Command-line stages: synth, select, pairgen, train, eval, gradcheck.

Each stage reads its inputs from paths in the run config, writes its
artifacts plus ``<stage>.config.txt`` into ``--out`` and exits 0 only when
all of them were written.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import dataset, network, pairgen, selection, trainer
from .config import RunConfig
from .core import Tensor, grad_check
from .errors import MDPCNNError
from .evaluation import repeat_protocol
from .losses import discrimination_loss

log = logging.getLogger("mdpcnn")


def _corpus(cfg: RunConfig):
    objects = dataset.load_corpus(cfg["paths.corpus"])
    return objects, len({o.label for o in objects})


def _path(cfg: RunConfig, key: str, out: Path, default: str) -> Path:
    return Path(cfg[key]) if cfg[key] else out / default


def cmd_synth(cfg: RunConfig, out: Path) -> None:
    dataset.synth_generate(
        out,
        num_classes=cfg["synth.num_classes"],
        objects_per_class=cfg["synth.objects_per_class"],
        views_per_object=cfg["synth.views_per_object"],
        image_size=cfg["synth.image_size"],
        seed=cfg["seed"],
    )
    print(f"corpus written to {out}")


def cmd_select(cfg: RunConfig, out: Path) -> None:
    objects, num_classes = _corpus(cfg)
    train_objs, _ = dataset.split(objects, cfg["split.train_fraction"])
    sel = cfg.selection_config()
    if sel.extractor == "embedding":
        net_cfg = cfg.network_config(num_classes)
        wpath = cfg["paths.weights"]
        weights = network.load_weights(wpath, net_cfg) if wpath else network.build(net_cfg, cfg["seed"])
        extractor = selection.EmbeddingExtractor(weights)
    elif sel.extractor == "downsample":
        extractor = selection.DownsampleExtractor()
    else:
        raise MDPCNNError(f"unknown extractor {sel.extractor!r}")
    fm = selection.extract_features(train_objs, extractor)
    centers = selection.class_centers(fm, num_classes)
    groups = selection.select_groups(fm, centers, sel, seed=cfg["seed"])
    header = f"mode={sel.mode} top_k={sel.top_k} group_size={sel.group_size} extractor={sel.extractor} seed={cfg['seed']}"
    selection.write_manifest(out / "selection.txt", groups, header)
    print(f"selected {len(groups)} groups")


def cmd_pairgen(cfg: RunConfig, out: Path) -> None:
    objects, _ = _corpus(cfg)
    train_objs, _ = dataset.split(objects, cfg["split.train_fraction"])
    views = min(o.num_views for o in train_objs)
    total = pairgen.pair_space_size(len(train_objs), views, cfg["selection.group_size"])
    print(f"pair_space_size = {total:,}")
    groups = selection.read_manifest(_path(cfg, "paths.selection", out, "selection.txt"))
    quota = cfg.pair_quota()
    records = pairgen.generate_pairs(groups, quota)
    pairgen.write_manifest(out / "pairs.csv", records, quota)
    print(f"generated {len(records)} pairs")


def cmd_train(cfg: RunConfig, out: Path) -> None:
    objects, num_classes = _corpus(cfg)
    train_objs, _ = dataset.split(objects, cfg["split.train_fraction"])
    pairs = pairgen.read_manifest(_path(cfg, "paths.pairs", out, "pairs.csv"))
    weights = network.build(cfg.network_config(num_classes), cfg["seed"])
    weights, trainlog = trainer.train(train_objs, pairs, weights, cfg.train_config(num_classes))
    network.save_weights(weights, out / "weights.mdpw")
    trainlog.write_csv(out / "trainlog.csv")
    print(f"trained {len(trainlog.loss)} iterations, final loss {trainlog.loss[-1]:.6f}")


def cmd_eval(cfg: RunConfig, out: Path) -> None:
    objects, num_classes = _corpus(cfg)
    _, test_objs = dataset.split(objects, cfg["split.train_fraction"])
    net_cfg = cfg.network_config(num_classes)
    if cfg["eval.untrained"]:
        weights = network.build(net_cfg, cfg["seed"])
    else:
        weights = network.load_weights(_path(cfg, "paths.weights", out, "weights.mdpw"), net_cfg)
    report = repeat_protocol(weights, test_objs, runs=cfg["eval.runs"], seed=cfg["seed"])
    report.write(out / "report.txt", out / "pr.csv")
    print(report.to_text(), end="")


def gradcheck_error(cfg: RunConfig, num_classes: int = 4) -> float:
    """Finite-difference check of the full weighted loss on a random pair batch (float64)."""
    net_cfg = cfg.network_config(num_classes, dtype="float64")
    weights = network.build(net_cfg, cfg["seed"])
    rng = np.random.default_rng(cfg["seed"])
    weights.centers.data[...] = rng.standard_normal(weights.centers.shape)
    b, v = cfg["gradcheck.batch_size"], net_cfg.views_per_group
    h, w, k = net_cfg.input_size
    views_a = rng.random((b * v, k, h, w))
    views_b = rng.random((b * v, k, h, w))
    labels_a = rng.integers(0, num_classes, b)
    labels_b = labels_a.copy()
    labels_b[1::2] = (labels_b[1::2] + 1) % num_classes
    pair = (labels_a == labels_b).astype(np.int64)
    loss_cfg = cfg.loss_config(num_classes)

    def build():
        ea = network.forward_chain(weights, Tensor(views_a))
        eb = network.forward_chain(weights, Tensor(views_b))
        return discrimination_loss(ea, eb, labels_a, labels_b, pair, loss_cfg, weights.centers)

    return grad_check(build, weights.parameters(), eps=cfg["gradcheck.eps"], probes=cfg["gradcheck.probes"], seed=cfg["seed"])


def cmd_gradcheck(cfg: RunConfig, out: Path) -> int:
    err = gradcheck_error(cfg)
    (out / "gradcheck.txt").write_text(f"max_relative_error = {err!r}\n")
    print(f"max_relative_error = {err:.3e}")
    return 0 if err <= cfg["gradcheck.threshold"] else 1


COMMANDS = {
    "synth": cmd_synth,
    "select": cmd_select,
    "pairgen": cmd_pairgen,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mdpcnn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="key = value config file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", type=Path, default=Path("."))
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
        for item in args.overrides:
            cfg.set_pair(item)
        if args.seed is not None:
            cfg.set("seed", args.seed)
        args.out.mkdir(parents=True, exist_ok=True)
        cfg.write(args.out / f"{args.command}.config.txt")
        status = COMMANDS[args.command](cfg, args.out)
    except (MDPCNNError, OSError, ValueError) as exc:
        print(f"error: {exc}".splitlines()[0], file=sys.stderr)
        return 2
    return status or 0


if __name__ == "__main__":
    sys.exit(main())

"""Flat, namespaced ``key = value`` run configuration."""

from __future__ import annotations

from pathlib import Path

from .errors import ConfigurationError
from .losses import LossConfig
from .network import NetworkConfig
from .pairgen import PairQuota
from .selection import SelectionConfig
from .trainer import ABLATION_PRESETS, TrainConfig

DEFAULTS = {
    "seed": 0,
    "paths.corpus": "corpus",
    "paths.selection": "",
    "paths.pairs": "",
    "paths.weights": "",
    "synth.num_classes": 8,
    "synth.objects_per_class": 10,
    "synth.views_per_object": 20,
    "synth.image_size": 64,
    "network.conv_channels": (32, 64, 128, 256, 512),
    "network.input_size": (64, 64, 1),
    "network.views_per_group": 3,
    "network.fc1_width": 512,
    "network.embedding_dim": 128,
    "network.dtype": "float32",
    "trainer.lr": 0.01,
    "trainer.lr_decay_factor": 0.5,
    "trainer.lr_decay_every_epochs": 3,
    "trainer.epochs": 9,
    "trainer.batch_size": 12,
    "trainer.ablation_mode": "all",
    "loss.alpha": 0.99,
    "loss.beta": 0.01,
    "loss.margin": 1.0,
    "loss.delta": 1.0,
    "selection.top_k": 3,
    "selection.group_size": 3,
    "selection.mode": "clustering",
    "selection.extractor": "downsample",
    "pairgen.num_positive": 2000,
    "pairgen.num_negative": 6000,
    "split.train_fraction": 0.8,
    "eval.runs": 10,
    "eval.untrained": False,
    "gradcheck.eps": 1e-6,
    "gradcheck.probes": 2,
    "gradcheck.threshold": 1e-4,
    "gradcheck.batch_size": 1,
}

# keys filled from trainer.ablation_mode unless given explicitly
_ABLATION_KEYS = ("selection.mode", "loss.alpha", "loss.beta")


def _parse(key: str, raw: str):
    default = DEFAULTS[key]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigurationError(f"bad value for {key}: {raw!r}") from None
    return raw


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


class RunConfig:
    """Defaults, then a config file, then ``--set`` overrides, then ablation presets for unset keys."""

    def __init__(self, values: dict | None = None):
        self._explicit = {}
        for k, v in (values or {}).items():
            self.set(k, v)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        cfg = cls()
        text = Path(path).read_text()
        for n, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"{path}:{n}: expected 'key = value'")
            key, raw = line.split("=", 1)
            cfg.set(key.strip(), raw)
        return cfg

    def set(self, key: str, value) -> None:
        if key not in DEFAULTS:
            raise ConfigurationError(f"unknown config key {key!r}")
        self._explicit[key] = _parse(key, value) if isinstance(value, str) else value

    def set_pair(self, assignment: str) -> None:
        if "=" not in assignment:
            raise ConfigurationError(f"--set expects key=value, got {assignment!r}")
        key, raw = assignment.split("=", 1)
        self.set(key.strip(), raw)

    def __getitem__(self, key: str):
        if key in self._explicit:
            return self._explicit[key]
        if key in _ABLATION_KEYS:
            mode = self["trainer.ablation_mode"]
            if mode not in ABLATION_PRESETS:
                raise ConfigurationError(f"unknown ablation mode {mode!r}")
            return dict(zip(_ABLATION_KEYS, ABLATION_PRESETS[mode]))[key]
        return DEFAULTS[key]

    def resolved(self) -> dict:
        return {k: self[k] for k in DEFAULTS}

    def dump(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.resolved().items())

    def write(self, path) -> None:
        Path(path).write_text(self.dump())

    # -- typed views -------------------------------------------------------

    def network_config(self, num_classes: int, dtype: str | None = None) -> NetworkConfig:
        return NetworkConfig(
            conv_channels=self["network.conv_channels"],
            input_size=self["network.input_size"],
            views_per_group=self["network.views_per_group"],
            batch_size=self["trainer.batch_size"],
            fc1_width=self["network.fc1_width"],
            embedding_dim=self["network.embedding_dim"],
            num_classes=num_classes,
            dtype=dtype or self["network.dtype"],
        )

    def loss_config(self, num_classes: int) -> LossConfig:
        return LossConfig(
            alpha=self["loss.alpha"],
            beta=self["loss.beta"],
            margin=self["loss.margin"],
            delta=self["loss.delta"],
            num_classes=num_classes,
        )

    def train_config(self, num_classes: int) -> TrainConfig:
        return TrainConfig(
            initial_lr=self["trainer.lr"],
            lr_decay_factor=self["trainer.lr_decay_factor"],
            lr_decay_every_epochs=self["trainer.lr_decay_every_epochs"],
            epochs=self["trainer.epochs"],
            batch_size=self["trainer.batch_size"],
            loss=self.loss_config(num_classes),
            ablation_mode=self["trainer.ablation_mode"],
            seed=self["seed"],
        )

    def selection_config(self) -> SelectionConfig:
        return SelectionConfig(
            top_k=self["selection.top_k"],
            group_size=self["selection.group_size"],
            mode=self["selection.mode"],
            extractor=self["selection.extractor"],
        )

    def pair_quota(self) -> PairQuota:
        return PairQuota(self["pairgen.num_positive"], self["pairgen.num_negative"], self["seed"])

"""Experiment configuration files.

Configs are INI-style text: ``[section]`` headers and ``key = value``
lines. Lists are comma separated. Relative data paths resolve against the
config file's directory. A bare name such as ``toy`` selects one of the
configs shipped in ``pointedge/configs``.
"""

from __future__ import annotations

import configparser
import glob
import io
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

from .geom import SCHEMAS
from .losses import LossWeights
from .point_branch import NetworkConfig

PRESETS = ("s3dis", "scannet", "toy", "toy_geometry", "gradcheck", "ablation_smoke")


@dataclass
class DataConfig:
    source: str = "synth"  # synth | files
    schema: str = "scannet-6d"
    num_classes: int = 4
    train_files: tuple[str, ...] = ()
    test_files: tuple[str, ...] = ()
    train_scenes: int = 4
    test_scenes: int = 4
    scene_seed: int = 0
    points_per_class: int = 128
    extent: float = 1.0
    colored: bool = True
    color_noise: float = 0.05


@dataclass
class BlockConfig:
    block_size: float = 0.8
    padding: float = 0.1
    eval_stride: float | None = None


@dataclass
class TrainConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    data: DataConfig = field(default_factory=DataConfig)
    block: BlockConfig = field(default_factory=BlockConfig)
    epochs: int = 100
    batch_size: int = 16
    blocks_per_epoch: int = 16
    base_lr: float = 0.05
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 25
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    checkpoint_every: int = 0
    grad_jitter: float = 0.05
    source_path: str | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.blocks_per_epoch < 1:
            raise ValueError("epochs, batch_size and blocks_per_epoch must be >= 1")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if not 0 < self.lr_decay_factor <= 1:
            raise ValueError("lr_decay_factor must lie in (0, 1]")
        if self.lr_decay_every < 1:
            raise ValueError("lr_decay_every must be >= 1")
        if self.data.schema not in SCHEMAS:
            raise ValueError(f"unknown schema {self.data.schema!r}")
        if self.network.input_dim != SCHEMAS[self.data.schema]:
            raise ValueError("network input_dim does not match the data schema")
        if self.network.num_classes != self.data.num_classes:
            raise ValueError("network and data disagree on num_classes")

    @property
    def n_points(self) -> int:
        return self.network.layer_sizes[-1]

    def lr_at(self, epoch: int) -> float:
        return self.base_lr * self.lr_decay_factor ** (epoch // self.lr_decay_every)

    def with_network(self, **changes) -> "TrainConfig":
        return replace(self, network=replace(self.network, **changes))

    def resolve(self, pattern: str) -> str:
        base = Path(self.source_path).parent if self.source_path else Path.cwd()
        p = Path(pattern)
        return str(p if p.is_absolute() else base / p)

    def split_files(self, split: str) -> list[str]:
        patterns = {"train": self.data.train_files, "test": self.data.test_files}.get(split)
        if patterns is None:
            raise ValueError(f"unknown split {split!r}; expected 'train' or 'test'")
        files: list[str] = []
        for pat in patterns:
            files.extend(sorted(glob.glob(self.resolve(pat))))
        return files


# ---------------------------------------------------------------------------
# parsing


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(",", " ").split())


def _strs(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in text.replace("\n", ",").split(",") if v.strip())


def _bool(text: str) -> bool:
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


_NETWORK_KEYS = {
    "layer_sizes": _ints,
    "k_list": _ints,
    "k_interp": int,
    "point_widths": _ints,
    "edge_widths": _ints,
    "group_sizes": _ints,
    "num_classes": int,
    "message_passing": str,
    "graph_mode": str,
    "edge_function": str,
    "fps_start": int,
    "init": str,
}
_LOSS_KEYS = {"lambda1": float, "lambda2": float, "alpha": str, "include_self_edges": _bool}
_DATA_KEYS = {
    "source": str,
    "schema": str,
    "num_classes": int,
    "train_files": _strs,
    "test_files": _strs,
    "train_scenes": int,
    "test_scenes": int,
    "scene_seed": int,
    "points_per_class": int,
    "extent": float,
    "colored": _bool,
    "color_noise": float,
}
_BLOCK_KEYS = {"block_size": float, "padding": float, "eval_stride": float}
_TRAIN_KEYS = {
    "epochs": int,
    "batch_size": int,
    "blocks_per_epoch": int,
    "base_lr": float,
    "lr_decay_factor": float,
    "lr_decay_every": int,
    "momentum": float,
    "weight_decay": float,
    "seed": int,
    "checkpoint_every": int,
    "grad_jitter": float,
}


def _section(cp, name, keys) -> dict:
    if not cp.has_section(name):
        return {}
    out = {}
    for key, raw in cp[name].items():
        if key not in keys:
            raise ValueError(f"[{name}] unknown key {key!r}")
        try:
            out[key] = keys[key](raw)
        except ValueError as exc:
            raise ValueError(f"[{name}] {key}: {exc}") from None
    return out


def parse_config(text: str, source_path: str | None = None) -> TrainConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.read_string(text)
    unknown = set(cp.sections()) - {"network", "loss", "data", "block", "train"}
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    data = DataConfig(**_section(cp, "data", _DATA_KEYS))
    net = _section(cp, "network", _NETWORK_KEYS)
    net.setdefault("num_classes", data.num_classes)
    net["input_dim"] = SCHEMAS[data.schema] if data.schema in SCHEMAS else 0
    loss = _section(cp, "loss", _LOSS_KEYS)
    if "alpha" in loss and loss["alpha"] != "auto":
        loss["alpha"] = float(loss["alpha"])
    return TrainConfig(
        network=NetworkConfig(**net),
        loss=LossWeights(**loss),
        data=data,
        block=BlockConfig(**_section(cp, "block", _BLOCK_KEYS)),
        source_path=source_path,
        **_section(cp, "train", _TRAIN_KEYS),
    )


def load_config(path_or_name: str) -> TrainConfig:
    p = Path(path_or_name)
    if not p.exists() and path_or_name in PRESETS:
        ref = resources.files("pointedge") / "configs" / f"{path_or_name}.ini"
        return parse_config(ref.read_text(encoding="utf-8"), str(ref))
    if not p.exists():
        raise FileNotFoundError(f"no config file {path_or_name!r} (presets: {', '.join(PRESETS)})")
    return parse_config(p.read_text(encoding="utf-8"), str(p.resolve()))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ", ".join(str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def dump_config(cfg: TrainConfig) -> str:
    """Serialize a config back to INI text; ``parse_config`` inverts it."""
    cp = configparser.ConfigParser()
    net = {f.name: getattr(cfg.network, f.name) for f in fields(cfg.network) if f.name != "input_dim"}
    cp["network"] = {k: _fmt(v) for k, v in net.items() if v is not None}
    cp["loss"] = {f.name: _fmt(getattr(cfg.loss, f.name)) for f in fields(cfg.loss)}
    cp["data"] = {f.name: _fmt(getattr(cfg.data, f.name)) for f in fields(cfg.data)}
    cp["block"] = {f.name: _fmt(getattr(cfg.block, f.name)) for f in fields(cfg.block) if getattr(cfg.block, f.name) is not None}
    cp["train"] = {k: _fmt(getattr(cfg, k)) for k in _TRAIN_KEYS}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()

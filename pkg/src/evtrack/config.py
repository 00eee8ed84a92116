"""Model and training configuration, presets, and key=value config files."""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError


@dataclass
class ModelConfig:
    """Architecture knobs shared by the slow and fast trackers.

    ``depth_fast`` is always half of ``depth_slow``: the fast tracker is a
    layer-pruned copy of the slow one, not an independent design.
    """

    embed_dim: int = 64
    patch_size: int = 16
    template_size: int = 64
    search_size: int = 128
    depth_slow: int = 12
    depth_fast: int = 6
    heads: int = 4
    mlp_ratio: int = 4
    in_channels: int = 3
    gcn_dims: tuple[int, int, int] = (1, 16, 64)
    voxel_grid: tuple[int, int, int] = (12, 16, 16)
    knn_k: int = 8
    max_points: int = 300
    template_context: float = 2.0
    search_context: float = 4.0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.template_size % self.patch_size or self.search_size % self.patch_size:
            raise ConfigError(
                f"crop sizes ({self.template_size}, {self.search_size}) must be "
                f"divisible by patch_size={self.patch_size}"
            )
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim={self.embed_dim} not divisible by heads={self.heads}")
        if self.depth_slow < 0 or self.depth_fast != self.depth_slow // 2:
            raise ConfigError(
                f"depth_fast must be depth_slow // 2, got {self.depth_fast} vs {self.depth_slow}"
            )
        if len(self.gcn_dims) != 3 or any(d < 1 for d in self.gcn_dims):
            raise ConfigError(f"gcn_dims must be three positive ints, got {self.gcn_dims}")
        if any(g < 1 for g in self.voxel_grid):
            raise ConfigError(f"voxel_grid dims must be >= 1, got {self.voxel_grid}")
        if self.knn_k < 1 or self.max_points < 1:
            raise ConfigError("knn_k and max_points must be >= 1")

    @property
    def n_template_tokens(self) -> int:
        return (self.template_size // self.patch_size) ** 2

    @property
    def n_search_tokens(self) -> int:
        return (self.search_size // self.patch_size) ** 2

    @property
    def map_size(self) -> int:
        return self.search_size // self.patch_size


def desk_config(**overrides) -> ModelConfig:
    """Small configuration that trains on a CPU in minutes."""
    return ModelConfig(**overrides)


def full_config(**overrides) -> ModelConfig:
    """Full-scale configuration matching the published slow/fast trackers."""
    base = dict(
        embed_dim=768,
        template_size=128,
        search_size=256,
        heads=12,
    )
    base.update(overrides)
    return ModelConfig(**base)


def model_config(scale: str = "desk", **overrides) -> ModelConfig:
    if scale == "desk":
        return desk_config(**overrides)
    if scale == "full":
        return full_config(**overrides)
    raise ConfigError(f"unknown scale {scale!r}, expected 'desk' or 'full'")


@dataclass
class TrainConfig:
    """One training stage.

    Full-scale stage-1 defaults: 50 epochs, lr 4e-4 (backbone) / 5e-4 (GCN),
    weight decay 1e-4, batch 38. Stage-2 drops the backbone lr to 4e-5 and
    runs 20 epochs. The desk preset divides epochs by 5 and uses batch 8.
    """

    stage: str = "slow"  # slow | fast | finetune
    epochs: int = 50
    lr_backbone: float = 4e-4
    lr_gcn: float = 5e-4
    weight_decay: float = 1e-4
    batch_size: int = 38
    batches_per_epoch: int = 0  # 0: derived from dataset size
    lambdas: tuple[float, float, float, float] = (1.0, 14.0, 1.0, 0.1)
    seed: int = 0
    desk_scale: bool = False
    delta_window_max: int = 10
    center_jitter: float = 0.25
    save_every: int = 0  # checkpoint every N epochs; 0: final only

    def validate(self):
        if self.stage not in ("slow", "fast", "finetune"):
            raise ConfigError(f"unknown stage {self.stage!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if len(self.lambdas) != 4:
            raise ConfigError("lambdas must have four entries (focal, l1, giou, kd)")


def stage1_config(which: str = "slow", desk_scale: bool = False, **overrides) -> TrainConfig:
    base = dict(stage=which, desk_scale=desk_scale)
    if desk_scale:
        base.update(epochs=10, batch_size=8)
    base.update(overrides)
    cfg = TrainConfig(**base)
    cfg.validate()
    return cfg


def stage2_config(desk_scale: bool = False, **overrides) -> TrainConfig:
    base = dict(stage="finetune", epochs=20, lr_backbone=4e-5, desk_scale=desk_scale)
    if desk_scale:
        base.update(epochs=10, batch_size=8)
    base.update(overrides)
    cfg = TrainConfig(**base)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# key=value config files


_TUPLE_FIELDS = {"gcn_dims", "voxel_grid", "lambdas", "sensor_size", "start_box",
                 "velocity", "sine_amp"}


def _parse_value(name: str, raw: str, target_type):
    raw = raw.strip()
    if name in _TUPLE_FIELDS:
        parts = [p for p in raw.replace("(", "").replace(")", "").split(",") if p.strip()]
        elem = float if any("." in p or "e" in p.lower() for p in parts) else int
        if name in ("lambdas", "start_box", "velocity", "sine_amp"):
            elem = float
        return tuple(elem(p) for p in parts)
    if target_type is bool:
        return raw.lower() in ("1", "true", "yes", "on")
    if target_type is int:
        return int(raw)
    if target_type is float:
        return float(raw)
    return raw


def apply_section(cfg, section: dict[str, str]):
    """Overwrite dataclass fields from a parsed config-file section."""
    fields = {f.name: f for f in dataclasses.fields(cfg)}
    for key, raw in section.items():
        if key not in fields:
            raise ConfigError(
                f"unknown config key {key!r}; valid keys: {', '.join(sorted(fields))}"
            )
        current = getattr(cfg, key)
        target = type(current) if current is not None else str
        setattr(cfg, key, _parse_value(key, raw, target))
    return cfg


def load_config_file(path) -> dict[str, dict[str, str]]:
    """Read an INI-style file into {section: {key: value}}."""
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise FileNotFoundError(f"config file not found: {path}")
    return {name: dict(parser[name]) for name in parser.sections()}


def save_config_file(path, sections: dict[str, dict]):
    """Write {section: {key: value}} as an INI-style file."""
    parser = configparser.ConfigParser()
    for name, values in sections.items():
        parser[name] = {
            k: ",".join(str(x) for x in v) if isinstance(v, (tuple, list)) else str(v)
            for k, v in values.items()
        }
    path = Path(path)
    with path.open("w") as fh:
        parser.write(fh)


def config_sections(model: ModelConfig | None = None, train: TrainConfig | None = None,
                    synth=None) -> dict[str, dict]:
    sections = {}
    if model is not None:
        sections["model"] = dataclasses.asdict(model)
    if train is not None:
        sections["train"] = dataclasses.asdict(train)
    if synth is not None:
        sections["synth"] = dataclasses.asdict(synth)
    return sections

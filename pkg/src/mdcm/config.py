"""Run configuration: typed sections, a plain-text ``key = value`` format,
schema validation, and a canonical echo for bit-identical reruns.

Grammar (one entry per line)::

    # full-line comment
    section.key = value

Values are parsed according to the schema: int, float, bool (``true`` /
``false``), string, or a comma-separated list.  Unknown keys and malformed
values are errors; every key is validated before any compute starts.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .errors import ConfigError


@dataclass
class BackboneConfig:
    image_size: int = 64
    channels: int = 3
    patch_size: int = 4
    embed_dim: int = 32
    stage_dims: list[int] = field(default_factory=lambda: [32, 64, 128, 256])
    stage_depths: list[int] = field(default_factory=lambda: [1, 1, 2, 1])
    stage_heads: list[int] = field(default_factory=lambda: [1, 2, 4, 8])
    kv_stride: int = 1
    ln_eps: float = 1e-5

    def base_grid(self) -> int:
        return self.image_size // self.patch_size

    def stage_grid(self, i: int) -> int:
        """Patch-token grid side after stage ``i`` (1-based)."""
        return self.base_grid() // (2 ** (i - 1))


@dataclass
class MscaConfig:
    enabled: bool = True
    gamma: float = 0.3
    clamp_floor: float = 0.05
    detach: bool = True


@dataclass
class MstsConfig:
    enabled: bool = True
    keep_ratio: list[float] = field(default_factory=lambda: [0.25] * 4)
    se_reduction: int = 4
    deep_stage: int = 3


@dataclass
class MsdaConfig:
    enabled: bool = True
    pre_softmax: bool = False


@dataclass
class LossConfig:
    alpha: float = 0.1
    betas: list[float] = field(default_factory=lambda: [0.6, 0.7, 0.8, 0.9, 1.0])
    normalized_smoothing: bool = False


@dataclass
class OptimConfig:
    lr: float = 0.045
    momentum: float = 0.9
    weight_decay: float = 0.0


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    augment: bool = True


@dataclass
class DataConfig:
    n_classes: int = 8
    clutter_density: float = 1.0


@dataclass
class EvalConfig:
    aggregation: str = "gate"


@dataclass
class RunConfig:
    seed: int = 0
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    msca: MscaConfig = field(default_factory=MscaConfig)
    msts: MstsConfig = field(default_factory=MstsConfig)
    msda: MsdaConfig = field(default_factory=MsdaConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


# Schema: dotted key -> (attribute path, value kind).  Integer path elements
# index into a list attribute.
_KEYS: dict[str, tuple[tuple, str]] = {
    "seed": (("seed",), "int"),
    "backbone.image_size": (("backbone", "image_size"), "int"),
    "backbone.channels": (("backbone", "channels"), "int"),
    "backbone.patch_size": (("backbone", "patch_size"), "int"),
    "backbone.embed_dim": (("backbone", "embed_dim"), "int"),
    "backbone.stage_dims": (("backbone", "stage_dims"), "list_int"),
    "backbone.stage_depths": (("backbone", "stage_depths"), "list_int"),
    "backbone.stage_heads": (("backbone", "stage_heads"), "list_int"),
    "backbone.kv_stride": (("backbone", "kv_stride"), "int"),
    "backbone.ln_eps": (("backbone", "ln_eps"), "float"),
    "msca.enabled": (("msca", "enabled"), "bool"),
    "msca.gamma": (("msca", "gamma"), "float"),
    "msca.clamp_floor": (("msca", "clamp_floor"), "float"),
    "msca.detach": (("msca", "detach"), "bool"),
    "msts.enabled": (("msts", "enabled"), "bool"),
    "msts.keep_ratio.1": (("msts", "keep_ratio", 0), "float"),
    "msts.keep_ratio.2": (("msts", "keep_ratio", 1), "float"),
    "msts.keep_ratio.3": (("msts", "keep_ratio", 2), "float"),
    "msts.keep_ratio.4": (("msts", "keep_ratio", 3), "float"),
    "msts.se_reduction": (("msts", "se_reduction"), "int"),
    "msts.deep_stage": (("msts", "deep_stage"), "int"),
    "msda.enabled": (("msda", "enabled"), "bool"),
    "msda.pre_softmax": (("msda", "pre_softmax"), "bool"),
    "loss.alpha": (("loss", "alpha"), "float"),
    "loss.betas": (("loss", "betas"), "list_float"),
    "loss.normalized_smoothing": (("loss", "normalized_smoothing"), "bool"),
    "optim.lr": (("optim", "lr"), "float"),
    "optim.momentum": (("optim", "momentum"), "float"),
    "optim.weight_decay": (("optim", "weight_decay"), "float"),
    "train.epochs": (("train", "epochs"), "int"),
    "train.batch_size": (("train", "batch_size"), "int"),
    "train.augment": (("train", "augment"), "bool"),
    "data.n_classes": (("data", "n_classes"), "int"),
    "data.clutter_density": (("data", "clutter_density"), "float"),
    "eval.aggregation": (("eval", "aggregation"), "str"),
}


def _cast(key: str, raw: str, kind: str):
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            if raw in ("true", "false"):
                return raw == "true"
            raise ValueError(raw)
        if kind == "str":
            return raw
        if kind == "list_int":
            return [int(v.strip()) for v in raw.split(",")]
        if kind == "list_float":
            return [float(v.strip()) for v in raw.split(",")]
    except ValueError:
        pass
    raise ConfigError(f"config: cannot parse value {raw!r} for key {key!r} "
                      f"(expected {kind})")


def _fmt(value, kind: str) -> str:
    if kind == "bool":
        return "true" if value else "false"
    if kind == "list_int":
        return ",".join(str(v) for v in value)
    if kind == "list_float":
        return ",".join(repr(float(v)) for v in value)
    if kind == "float":
        return repr(float(value))
    return str(value)


def set_key(cfg: RunConfig, key: str, raw: str) -> None:
    """Apply one ``key = value`` entry; unknown keys are errors."""
    if key not in _KEYS:
        raise ConfigError(f"config: unknown key {key!r}")
    path, kind = _KEYS[key]
    value = _cast(key, raw, kind)
    obj = cfg
    for part in path[:-1]:
        obj = getattr(obj, part) if isinstance(part, str) else obj[part]
    last = path[-1]
    if isinstance(last, str):
        setattr(obj, last, value)
    else:
        obj[last] = value


def get_key(cfg: RunConfig, key: str):
    path, _ = _KEYS[key]
    obj = cfg
    for part in path:
        obj = getattr(obj, part) if isinstance(part, str) else obj[part]
    return obj


def parse_text(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse config text on top of ``base`` (defaults when omitted)."""
    cfg = base if base is not None else RunConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(
                f"config line {lineno}: expected 'key = value', got {line!r}")
        key, _, raw = stripped.partition("=")
        set_key(cfg, key.strip(), raw)
    return cfg


def load_file(path: str, base: RunConfig | None = None) -> RunConfig:
    try:
        with open(path, "r", encoding="ascii") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path}: {exc}") from exc
    return parse_text(text, base)


def to_text(cfg: RunConfig) -> str:
    """Canonical echo: every schema key, sorted, round-trip exact."""
    lines = []
    for key in sorted(_KEYS):
        _, kind = _KEYS[key]
        lines.append(f"{key} = {_fmt(get_key(cfg, key), kind)}")
    return "\n".join(lines) + "\n"


def validate(cfg: RunConfig) -> RunConfig:
    """Check every range and cross-field constraint; returns ``cfg``."""
    b = cfg.backbone

    def need(cond: bool, msg: str):
        if not cond:
            raise ConfigError(f"config: {msg}")

    need(b.image_size > 0 and b.channels > 0 and b.patch_size > 0,
         "image_size, channels, patch_size must be positive")
    need(b.image_size % b.patch_size == 0,
         f"image_size {b.image_size} not divisible by patch_size {b.patch_size}")
    grid = b.base_grid()
    need(grid % 8 == 0,
         f"patch grid side {grid} must be divisible by 8 (three stride-2 "
         f"stage transitions)")
    need(len(b.stage_dims) == 4 and len(b.stage_depths) == 4
         and len(b.stage_heads) == 4,
         "stage_dims, stage_depths, stage_heads must each have 4 entries")
    need(all(d2 > d1 for d1, d2 in zip(b.stage_dims, b.stage_dims[1:])),
         "stage_dims must be strictly increasing")
    need(all(d % h == 0 for d, h in zip(b.stage_dims, b.stage_heads)),
         "every stage dim must be divisible by its head count")
    need(all(d >= 1 for d in b.stage_depths), "stage depths must be >= 1")
    need(b.embed_dim == b.stage_dims[0],
         f"embed_dim {b.embed_dim} must equal stage_dims[0] "
         f"{b.stage_dims[0]} (stage 1 layers keep the channel count)")
    need(b.kv_stride >= 1, "kv_stride must be >= 1")
    need(b.ln_eps > 0, "ln_eps must be positive")

    need(cfg.msca.gamma >= 0, "msca.gamma must be >= 0")
    need(0 < cfg.msca.clamp_floor <= 1, "msca.clamp_floor must be in (0, 1]")

    if cfg.msts.enabled:
        need(grid % 16 == 0,
             f"patch grid side {grid} must be divisible by 16 when token "
             f"selection is enabled (stage-4 grid must merge 2x2)")
    need(all(0 < r <= 1 for r in cfg.msts.keep_ratio),
         "msts.keep_ratio entries must be in (0, 1]")
    need(len(cfg.msts.keep_ratio) == 4, "msts.keep_ratio needs 4 entries")
    need(cfg.msts.se_reduction >= 1, "msts.se_reduction must be >= 1")
    need(all(d % cfg.msts.se_reduction == 0 for d in b.stage_dims),
         "every stage dim must be divisible by msts.se_reduction")
    need(1 <= cfg.msts.deep_stage <= 4, "msts.deep_stage must be in 1..4")

    if cfg.msda.enabled:
        need(cfg.msts.enabled,
             "msda.enabled requires msts.enabled (gating consumes the "
             "per-stage heads)")

    need(cfg.loss.alpha >= 0, "loss.alpha must be >= 0")
    need(len(cfg.loss.betas) == 5, "loss.betas needs exactly 5 entries")
    need(all(0 <= v <= 1 for v in cfg.loss.betas),
         "loss.betas entries must be in [0, 1]")
    need(all(v2 >= v1 for v1, v2 in zip(cfg.loss.betas, cfg.loss.betas[1:])),
         "loss.betas must be non-decreasing")

    need(cfg.optim.lr > 0, "optim.lr must be positive")
    need(0 <= cfg.optim.momentum < 1, "optim.momentum must be in [0, 1)")
    need(cfg.optim.weight_decay == 0.0,
         "optim.weight_decay must be 0.0 (momentum SGD without decay)")

    need(cfg.train.epochs >= 1, "train.epochs must be >= 1")
    need(cfg.train.batch_size >= 1, "train.batch_size must be >= 1")

    need(cfg.data.n_classes >= 2, "data.n_classes must be >= 2")
    need(cfg.data.clutter_density >= 0, "data.clutter_density must be >= 0")

    need(cfg.eval.aggregation in ("gate", "sum"),
         f"eval.aggregation must be 'gate' or 'sum', got "
         f"{cfg.eval.aggregation!r}")
    return cfg


def copy_config(cfg: RunConfig) -> RunConfig:
    return dataclasses.replace(
        cfg,
        backbone=dataclasses.replace(
            cfg.backbone,
            stage_dims=list(cfg.backbone.stage_dims),
            stage_depths=list(cfg.backbone.stage_depths),
            stage_heads=list(cfg.backbone.stage_heads)),
        msca=dataclasses.replace(cfg.msca),
        msts=dataclasses.replace(cfg.msts,
                                 keep_ratio=list(cfg.msts.keep_ratio)),
        msda=dataclasses.replace(cfg.msda),
        loss=dataclasses.replace(cfg.loss, betas=list(cfg.loss.betas)),
        optim=dataclasses.replace(cfg.optim),
        train=dataclasses.replace(cfg.train),
        data=dataclasses.replace(cfg.data),
        eval=dataclasses.replace(cfg.eval),
    )

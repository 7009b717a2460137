"""Run configuration in INI form.

Canonical schema (every key optional; these are the mini defaults)::

    [run]        seed = 0            out = runs/default
    [backbone]   stage_channels = 8,16,32,64   stage_strides = 2,2,2,1
                 blocks_per_stage = 1,1,1,1    input_h = 48   input_w = 32
                 stem_channels = 8             stem_stride = 1
    [fusion]     stages = 1,2,3,4
    [attention]  ordering = S+cat+C   sam_kernel = 7   cam_reduction = 4
    [mgo]        k = 6               levels = 1,2,3,4,5,6
    [mpfe]       reduce_channels = 128         feature_dim = 512
    [model]      num_ids = auto      (auto: number of train identities)
    [training]   epochs = 150  P = 16  K = 4  batches_per_epoch = auto
                 margin = 1.0  smoothing = 0.1
                 erase_probability = 0.5  erase_area = 0.02,0.4  erase_aspect = 0.3,3.3333
                 momentum = 0.9  weight_decay = 0.0005  checkpoint_every = 0
    [eval]       max_rank = 10
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .attention import AttentionConfig, Ordering
from .backbone import BackboneConfig, FusionConfig
from .heads import MgoConfig, MpfeConfig
from .model import ModelConfig
from .training import ErasingConfig, TrainConfig


class ConfigError(ValueError):
    pass


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.replace(" ", "").split(",") if t)


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.replace(" ", "").split(",") if t)


def _join(vals) -> str:
    return ",".join(repr(v) if isinstance(v, float) else str(v) for v in vals)


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    num_ids_auto: bool = True
    max_rank: int = 10
    seed: int = 0
    out: str = "runs/default"

    def with_num_ids(self, n: int) -> "RunConfig":
        if not self.num_ids_auto and n != self.model.num_ids:
            raise ConfigError(f"config fixes num_ids={self.model.num_ids} but the train split "
                              f"has {n} identities")
        return dataclasses.replace(self, model=dataclasses.replace(self.model, num_ids=n))

    def validate(self, num_train_ids: int | None = None) -> None:
        """Check every cross-field constraint before any compute happens."""
        try:
            self.model.validate()
            self.train.validate(num_train_ids)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.max_rank < 1:
            raise ConfigError("max_rank must be >= 1")


def model_section_text(cfg: ModelConfig) -> str:
    b, a = cfg.backbone, cfg.attention
    lines = [
        "[backbone]",
        f"stage_channels = {_join(b.stage_channels)}",
        f"stage_strides = {_join(b.stage_strides)}",
        f"blocks_per_stage = {_join(b.blocks_per_stage)}",
        f"input_h = {b.input_hw[0]}",
        f"input_w = {b.input_hw[1]}",
        f"stem_channels = {b.stem_channels}",
        f"stem_stride = {b.stem_stride}",
        "",
        "[fusion]",
        f"stages = {_join(cfg.fusion.included_stages)}",
        "",
        "[attention]",
        f"ordering = {a.ordering.label.replace('©', 'cat')}",
        f"sam_kernel = {a.sam_kernel}",
        f"cam_reduction = {a.cam_reduction}",
        "",
        "[mgo]",
        f"k = {cfg.mgo.k}",
        f"levels = {_join(cfg.mgo.levels)}",
        "",
        "[mpfe]",
        f"reduce_channels = {cfg.mpfe.reduce_channels}",
        f"feature_dim = {cfg.mpfe.feature_dim}",
        "",
        "[model]",
        f"num_ids = {cfg.num_ids}",
    ]
    return "\n".join(lines) + "\n"


def config_hash(cfg: ModelConfig) -> str:
    return hashlib.sha256(model_section_text(cfg).encode()).hexdigest()


def to_text(rc: RunConfig) -> str:
    t, e = rc.train, rc.train.erasing
    model = model_section_text(rc.model)
    if rc.num_ids_auto:
        model = model.replace(f"num_ids = {rc.model.num_ids}", "num_ids = auto")
    return "\n".join([
        "[run]",
        f"seed = {rc.seed}",
        f"out = {rc.out}",
        "",
        model.rstrip("\n"),
        "",
        "[training]",
        f"epochs = {t.epochs}",
        f"P = {t.P}",
        f"K = {t.K}",
        f"batches_per_epoch = {t.batches_per_epoch or 'auto'}",
        f"margin = {t.margin!r}",
        f"smoothing = {t.smoothing!r}",
        f"erase_probability = {e.probability!r}",
        f"erase_area = {_join(e.area)}",
        f"erase_aspect = {_join(e.aspect)}",
        f"momentum = {t.momentum!r}",
        f"weight_decay = {t.weight_decay!r}",
        f"checkpoint_every = {t.checkpoint_every}",
        "",
        "[eval]",
        f"max_rank = {rc.max_rank}",
    ]) + "\n"


KNOWN = {
    "run": {"seed", "out"},
    "backbone": {"stage_channels", "stage_strides", "blocks_per_stage", "input_h", "input_w",
                 "stem_channels", "stem_stride"},
    "fusion": {"stages"},
    "attention": {"ordering", "sam_kernel", "cam_reduction"},
    "mgo": {"k", "levels"},
    "mpfe": {"reduce_channels", "feature_dim"},
    "model": {"num_ids"},
    "training": {"epochs", "p", "k", "batches_per_epoch", "margin", "smoothing",
                 "erase_probability", "erase_area", "erase_aspect", "momentum", "weight_decay",
                 "checkpoint_every"},
    "eval": {"max_rank"},
}


def from_text(text: str) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unparseable config: {exc}".replace("\n", " ")) from None
    for sec in cp.sections():
        if sec not in KNOWN:
            raise ConfigError(f"unknown section [{sec}]")
        extra = set(cp[sec]) - KNOWN[sec]
        if extra:
            raise ConfigError(f"unknown key(s) in [{sec}]: {', '.join(sorted(extra))}")

    def get(sec, key, default, conv=str):
        if cp.has_option(sec, key):
            raw = cp.get(sec, key)
            try:
                return conv(raw)
            except ValueError:
                raise ConfigError(f"[{sec}] {key}: cannot parse {raw!r}") from None
        return default

    d = BackboneConfig()
    backbone = BackboneConfig(
        stage_channels=get("backbone", "stage_channels", d.stage_channels, _ints),
        stage_strides=get("backbone", "stage_strides", d.stage_strides, _ints),
        blocks_per_stage=get("backbone", "blocks_per_stage", d.blocks_per_stage, _ints),
        input_hw=(get("backbone", "input_h", d.input_hw[0], int),
                  get("backbone", "input_w", d.input_hw[1], int)),
        stem_channels=get("backbone", "stem_channels", d.stem_channels, int),
        stem_stride=get("backbone", "stem_stride", d.stem_stride, int),
    )
    if not (len(backbone.stage_channels) == len(backbone.stage_strides)
            == len(backbone.blocks_per_stage) == 4):
        raise ConfigError("[backbone] needs four entries per stage list")
    fusion = FusionConfig(get("fusion", "stages", (1, 2, 3, 4), _ints))
    da = AttentionConfig()
    attention = AttentionConfig(get("attention", "ordering", da.ordering, Ordering.parse),
                                get("attention", "sam_kernel", da.sam_kernel, int),
                                get("attention", "cam_reduction", da.cam_reduction, int))
    mgo = MgoConfig(get("mgo", "k", 6, int), get("mgo", "levels", None, _ints) or None)
    if mgo.levels is None:
        mgo = MgoConfig(mgo.k, tuple(range(1, mgo.k + 1)))
    mpfe = MpfeConfig(get("mpfe", "reduce_channels", 128, int), get("mpfe", "feature_dim", 512, int))
    raw_ids = get("model", "num_ids", "auto")
    auto = raw_ids.strip().lower() == "auto"
    try:
        num_ids = ModelConfig.num_ids if auto else int(raw_ids)
    except ValueError:
        raise ConfigError(f"[model] num_ids: cannot parse {raw_ids!r}") from None
    dt, de = TrainConfig(), ErasingConfig()
    bpe = get("training", "batches_per_epoch", "auto")
    train = TrainConfig(
        epochs=get("training", "epochs", dt.epochs, int),
        P=get("training", "p", dt.P, int),
        K=get("training", "k", dt.K, int),
        batches_per_epoch=None if bpe.strip().lower() == "auto" else int(bpe),
        margin=get("training", "margin", dt.margin, float),
        smoothing=get("training", "smoothing", dt.smoothing, float),
        erasing=ErasingConfig(get("training", "erase_probability", de.probability, float),
                              get("training", "erase_area", de.area, _floats),
                              get("training", "erase_aspect", de.aspect, _floats)),
        momentum=get("training", "momentum", dt.momentum, float),
        weight_decay=get("training", "weight_decay", dt.weight_decay, float),
        checkpoint_every=get("training", "checkpoint_every", dt.checkpoint_every, int),
    )
    return RunConfig(ModelConfig(backbone, fusion, attention, mgo, mpfe, num_ids), train, auto,
                     get("eval", "max_rank", 10, int), get("run", "seed", 0, int),
                     get("run", "out", "runs/default"))


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"{path}: config not found")
    return from_text(path.read_text(encoding="utf-8"))


def model_config_from_text(text: str) -> ModelConfig:
    rc = from_text(text)
    if rc.num_ids_auto:
        raise ConfigError("stored model config lacks num_ids")
    return rc.model

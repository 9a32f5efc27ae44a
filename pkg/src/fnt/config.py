"""Experiment configuration: sectioned key/value files with typed parsing.

The on-disk format is INI (configparser): one section per concern, every
value typed by the corresponding dataclass field.  A resolved configuration
is echoed into each run's output directory and must re-parse to an equal
structure.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import asdict, dataclass, field, fields, replace
from typing import get_args, get_origin

from .corpus import GeneratorConfig
from .encoder import EncoderConfig
from .model import ModelConfig

__all__ = [
    "ModelSection",
    "LossSection",
    "DataSection",
    "TrainSection",
    "DecodeSection",
    "ExperimentConfig",
    "ConfigError",
    "apply_overrides",
]


class ConfigError(ValueError):
    pass


@dataclass
class ModelSection:
    mode: str = "offline"  # offline | streaming
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 2
    d_ffn: int = 128
    chunk_frames: int = 2
    left_chunks: int = 4  # -1 = unbounded left context
    downsample_rate: int = 4
    downsample_mode: str = "mix"
    d_blank: int = 32
    d_joint: int = 32
    predv_layers: int = 2
    predv_d: int = 32
    predv_heads: int = 2
    ctx_layers: int = 2
    ctx_d: int = 32
    ctx_heads: int = 2
    context_source: str = "trained"
    utterance_level: bool = False
    token_level: bool = False
    slongfnt_text: bool = False
    history_speech: bool = False
    beta_init: float = 1.0


@dataclass
class LossSection:
    lambda_lm: float = 0.1
    lambda_ctc: float = 0.1


@dataclass
class DataSection:
    dataset: str = "dataset"
    n_his: int = 2


@dataclass
class TrainSection:
    steps: int = 1500
    batch_size: int = 2
    lr: float = 0.08
    clip_norm: float = 1.0
    seed: int = 1234
    dtype: str = "float32"
    pretrain_steps: int = 0
    pretrain_sessions: int = 40
    pretrain_lr: float = 0.3
    save_every: int = 0  # 0 = final checkpoint only


@dataclass
class DecodeSection:
    beam_width: int = 8
    n_his: int = 2
    max_symbols_per_frame: int = 5
    history_text: str = "hypothesis"  # oracle | hypothesis | none
    frame_shift_ms: float = 10.0
    split: str = "test"


@dataclass
class ExperimentConfig:
    model: ModelSection = field(default_factory=ModelSection)
    loss: LossSection = field(default_factory=LossSection)
    data: DataSection = field(default_factory=DataSection)
    train: TrainSection = field(default_factory=TrainSection)
    decode: DecodeSection = field(default_factory=DecodeSection)
    gen: GeneratorConfig = field(default_factory=GeneratorConfig)

    _SECTIONS = ("model", "loss", "data", "train", "decode", "gen")

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        for name in self._SECTIONS:
            cp[name] = {k: _format_value(v) for k, v in asdict(getattr(self, name)).items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text: str) -> "ExperimentConfig":
        cp = configparser.ConfigParser()
        cp.read_string(text)
        kwargs = {}
        section_types = {
            "model": ModelSection,
            "loss": LossSection,
            "data": DataSection,
            "train": TrainSection,
            "decode": DecodeSection,
            "gen": GeneratorConfig,
        }
        for name, typ in section_types.items():
            if not cp.has_section(name):
                kwargs[name] = typ()
                continue
            known = {f.name: f.type for f in fields(typ)}
            values = {}
            for key, raw in cp.items(name):
                if key not in known:
                    raise ConfigError(f"unknown key [{name}] {key}")
                values[key] = _parse_value(raw, known[key], f"[{name}] {key}")
            kwargs[name] = typ(**values)
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_ini(f.read())

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_ini())

    # ---- derived structures ------------------------------------------------
    def encoder_config(self) -> EncoderConfig:
        m = self.model
        return EncoderConfig(
            n_layers=m.n_layers,
            d_model=m.d_model,
            n_heads=m.n_heads,
            d_ffn=m.d_ffn,
            d_feat=self.gen.d_feat,
            chunk_frames=m.chunk_frames,
            left_chunks=None if m.left_chunks < 0 else m.left_chunks,
            downsample_rate=m.downsample_rate,
            downsample_mode=m.downsample_mode,
        )

    def model_config(self) -> ModelConfig:
        m = self.model
        return ModelConfig(
            vocab_size=self.gen.vocab_size,
            encoder=self.encoder_config(),
            d_blank=m.d_blank,
            d_joint=m.d_joint,
            predv_layers=m.predv_layers,
            predv_d=m.predv_d,
            predv_heads=m.predv_heads,
            ctx_layers=m.ctx_layers,
            ctx_d=m.ctx_d,
            ctx_heads=m.ctx_heads,
            streaming=m.mode == "streaming",
            utterance_level=m.utterance_level,
            token_level=m.token_level,
            slongfnt_text=m.slongfnt_text,
            history_speech=m.history_speech,
            context_source=m.context_source,
            beta_init=m.beta_init,
        )


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _parse_value(raw: str, typ, where: str):
    raw = raw.strip()
    if typ in (bool, "bool"):
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{where}: expected a boolean, got {raw!r}")
    if typ in (int, "int"):
        try:
            return int(raw)
        except ValueError as e:
            raise ConfigError(f"{where}: expected an integer, got {raw!r}") from e
    if typ in (float, "float"):
        try:
            return float(raw)
        except ValueError as e:
            raise ConfigError(f"{where}: expected a number, got {raw!r}") from e
    if typ in (str, "str"):
        return raw
    raise ConfigError(f"{where}: unsupported field type {typ!r}")


def apply_overrides(config: ExperimentConfig, overrides: list[str]) -> ExperimentConfig:
    """Apply ``section.key=value`` strings on top of a parsed configuration."""
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        target, raw = item.split("=", 1)
        section_name, key = target.split(".", 1)
        if section_name not in ExperimentConfig._SECTIONS:
            raise ConfigError(f"unknown section {section_name!r}")
        section = getattr(config, section_name)
        known = {f.name: f.type for f in fields(type(section))}
        if key not in known:
            raise ConfigError(f"unknown key [{section_name}] {key}")
        value = _parse_value(raw, known[key], target)
        setattr(config, section_name, replace(section, **{key: value}))
    return config

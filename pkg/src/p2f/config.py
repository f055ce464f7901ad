"""Run configuration: INI-style text with strict key checking.

The resolved configuration is rendered to a canonical text form and
echoed into every checkpoint for provenance.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field

from .encoder import EncoderConfig
from .generator import GeneratorConfig
from .lm import LmConfig
from .trainer import TrainConfig
from .evaluator import VerificationConfig


@dataclass
class DataConfig:
    n_train_specs: int = 256
    n_test_specs: int = 32
    reg_ratio: float = 1.0
    seed: int = 42


@dataclass
class RunConfig:
    lm: LmConfig = field(default_factory=LmConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    verify: VerificationConfig = field(default_factory=VerificationConfig)
    data: DataConfig = field(default_factory=DataConfig)


# section -> {config key: (dataclass attr, type)}
_SCHEMA = {
    "lm": {
        "layers": ("n_layers", int),
        "d_model": ("d_model", int),
        "heads": ("n_heads", int),
        "d_ff": ("d_ff", int),
        "max_seq_len": ("max_seq_len", int),
    },
    "generator": {
        "hidden": ("hidden", int),
        "layers": ("n_layers", int),
        "heads": ("n_heads", int),
        "dropout": ("dropout", float),
        "chunk_len": ("chunk_len", int),
        "rank": ("rank", int),
        "alpha": ("alpha", float),
        "gate_init": ("gate_init", float),
        "scale_init": ("scale_init", float),
        "ablation": ("ablation", str),
    },
    "encoder": {
        "d_embed": ("d_embed", int),
        "max_len": ("max_description_len", int),
        "freeze": ("freeze_embeddings", bool),
    },
    "train": {
        "lr": ("lr", float),
        "batch": ("batch_size", int),
        "epochs": ("max_epochs", int),
        "warmup": ("warmup_ratio", float),
        "weight_decay": ("weight_decay", float),
        "seed": ("seed", int),
        "grad_accumulation_steps": ("grad_accumulation_steps", int),
        "eval_interval": ("eval_interval", int),
        "prefix_noise": ("prefix_noise", float),
    },
    "verify": {
        "samples": ("samples", int),
        "temperature": ("temperature", float),
        "alpha_sig": ("alpha_sig", float),
        "max_new_tokens": ("max_new_tokens", int),
        "base_seed": ("base_seed", int),
    },
    "data": {
        "n_train_specs": ("n_train_specs", int),
        "n_test_specs": ("n_test_specs", int),
        "reg_ratio": ("reg_ratio", float),
        "seed": ("seed", int),
    },
}

_SECTION_ATTR = {
    "lm": "lm",
    "generator": "generator",
    "encoder": "encoder",
    "train": "train",
    "verify": "verify",
    "data": "data",
}


class ConfigError(ValueError):
    pass


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"invalid boolean: {text!r}")


def parse_config(text: str) -> RunConfig:
    """Parse INI text; unknown sections or keys are rejected."""
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as err:
        raise ConfigError(f"malformed config: {err}") from err
    cfg = RunConfig()
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        schema = _SCHEMA[section]
        target = getattr(cfg, _SECTION_ATTR[section])
        for key, raw in parser.items(section):
            if key not in schema:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            attr, typ = schema[key]
            value = _parse_bool(raw) if typ is bool else typ(raw)
            setattr(target, attr, value)
    # re-run dataclass validation on mutated values
    for attr in _SECTION_ATTR.values():
        obj = getattr(cfg, attr)
        if hasattr(obj, "__post_init__"):
            obj.__post_init__()
    return cfg


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as f:
        return parse_config(f.read())


def canonical_text(cfg: RunConfig) -> str:
    """Deterministic rendering of the fully resolved configuration."""
    out = io.StringIO()
    for section in sorted(_SCHEMA):
        out.write(f"[{section}]\n")
        target = getattr(cfg, _SECTION_ATTR[section])
        for key in sorted(_SCHEMA[section]):
            attr, typ = _SCHEMA[section][key]
            value = getattr(target, attr)
            if typ is bool:
                value = "true" if value else "false"
            elif typ is float:
                value = repr(float(value))
            out.write(f"{key} = {value}\n")
        out.write("\n")
    return out.getvalue()

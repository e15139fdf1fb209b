"""
Flat `key = value` run configuration read with toml.

Model, masking, schedule and pretraining fields use their own names; probe
and fine-tuning fields are prefixed `probe_` / `finetune_`. The run-level
`seed` and `threads` feed every stage.
"""
import dataclasses
import logging
import os
from dataclasses import dataclass, field
from typing import Optional

import toml

from errors import ConfigError
from finetune import FinetuneConfig
from model import PRESETS, ModelConfig
from objectives import MaskingConfig
from probing import ProbeConfig
from training import PretrainConfig, ScheduleConfig

logger = logging.getLogger(__name__)

SHARED = ('seed', 'threads')
PREFIXES = {'probe': 'probe_', 'finetune': 'finetune_'}
SECTIONS = {
    'model': ModelConfig,
    'masking': MaskingConfig,
    'schedule': ScheduleConfig,
    'pretrain': PretrainConfig,
    'probe': ProbeConfig,
    'finetune': FinetuneConfig,
}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    masking: MaskingConfig = field(default_factory=MaskingConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    seed: int = 0
    threads: int = 1
    out_dir: str = 'output'
    vocab_path: Optional[str] = None
    train_corpus: Optional[str] = None
    dev_corpus: Optional[str] = None
    preset: Optional[str] = None
    log_level: str = 'INFO'

    def validate(self):
        self.model.validate()
        self.masking.validate()
        self.schedule.validate()
        self.pretrain.validate(self.model.max_length)
        self.probe.validate()
        self.finetune.validate()
        if self.threads < 1:
            raise ConfigError(f'threads must be positive, got {self.threads}')
        return self

    def items(self):
        """
        Every resolved flat key with its value.
        """
        values = {}
        for section in SECTIONS:
            prefix = PREFIXES.get(section, '')
            for name, value in dataclasses.asdict(getattr(self, section)).items():
                if name not in SHARED:
                    values[prefix + name] = value
        for f in dataclasses.fields(self):
            if f.name not in SECTIONS:
                values[f.name] = getattr(self, f.name)
        return values

    def resolved_lines(self):
        return [f'{key} = {value!r}' for key, value in sorted(self.items().items())]

    def log(self):
        for line in self.resolved_lines():
            logger.info(line)


def _known_keys():
    keys = {}
    for section, cls in SECTIONS.items():
        prefix = PREFIXES.get(section, '')
        for f in dataclasses.fields(cls):
            if f.name not in SHARED:
                keys[prefix + f.name] = (section, f.name)
    for f in dataclasses.fields(RunConfig):
        if f.name not in SECTIONS:
            keys[f.name] = (None, f.name)
    return keys


def _coerce(key, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f'{key} must be true or false, got {value!r}')
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f'{key} must be an integer, got {value!r}')
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f'{key} must be a number, got {value!r}')
        value = float(value)
    elif isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f'{key} must be a string, got {value!r}')
    return value


def read_config_file(config_file):
    """
    Raw key/value pairs of a flat TOML file.
    """
    if not os.path.exists(config_file):
        raise ConfigError(f"Configuration file '{config_file}' not found.")
    try:
        with open(config_file, 'r', encoding='utf-8') as f:
            values = toml.load(f)
    except toml.TomlDecodeError as e:
        raise ConfigError(f'{config_file}: {e}') from e

    nested = sorted(key for key, value in values.items() if isinstance(value, dict))
    if nested:
        raise ConfigError(f'{config_file}: tables are not supported, found {nested}')
    return values


def build_config(values, overrides=None):
    """
    RunConfig from flat values; `overrides` (CLI flags) win over the file and
    a `preset` fills model fields not given explicitly.
    """
    values = {**values, **{k: v for k, v in (overrides or {}).items() if v is not None}}
    known = _known_keys()
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f'unknown configuration keys: {unknown}')

    run = RunConfig()
    preset = values.get('preset')
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f'unknown preset {preset!r}; choose from {sorted(PRESETS)}')
        run.model = dataclasses.replace(run.model, **PRESETS[preset])

    for key, value in values.items():
        section, name = known[key]
        target = run if section is None else getattr(run, section)
        default = getattr(target, name)
        if default is not None:
            value = _coerce(key, value, default)
        setattr(target, name, value)

    for name in SHARED:
        for section in ('pretrain', 'probe', 'finetune'):
            target = getattr(run, section)
            if hasattr(target, name):
                setattr(target, name, getattr(run, name))
    return run.validate()


def load_config(config_file=None, overrides=None):
    values = read_config_file(config_file) if config_file else {}
    return build_config(values, overrides)

import os

import pytest

from config import build_config, load_config, read_config_file
from errors import ConfigError


def write(tmp_path, text):
    path = tmp_path / 'run.toml'
    path.write_text(text, encoding='utf-8')
    return str(path)


def test_defaults_validate():
    run = load_config()
    assert run.model.norm_style == 'normformer'
    assert run.pretrain.optimizer == 'lamb'
    assert run.out_dir == 'output'


def test_repository_config_loads():
    run = load_config(os.path.join(os.path.dirname(__file__), '..', 'config.toml'))
    assert run.model.hidden_size == 64
    assert run.schedule.total_steps == 2000
    assert run.probe.epochs == 5


def test_keys_route_to_their_sections(tmp_path):
    path = write(tmp_path, '\n'.join([
        'hidden_size = 32', 'num_heads = 4', 'strategy = "whole_word"', 'peak_lr = 0.02',
        'warmup_steps = 10', 'total_steps = 100', 'probe_epochs = 2', 'finetune_lr = 1e-4',
        'seed = 9', 'threads = 3',
    ]))
    run = load_config(path)
    assert run.model.hidden_size == 32
    assert run.masking.strategy == 'whole_word'
    assert run.schedule.peak_lr == 0.02
    assert run.probe.epochs == 2 and run.finetune.lr == 1e-4
    assert run.pretrain.seed == run.probe.seed == run.finetune.seed == 9
    assert run.pretrain.threads == 3


def test_flags_override_the_file(tmp_path):
    path = write(tmp_path, 'seed = 4\nout_dir = "runs/a"\n')
    run = load_config(path, {'seed': 11, 'out_dir': None, 'threads': 2})
    assert run.seed == 11 and run.pretrain.seed == 11
    assert run.out_dir == 'runs/a'
    assert run.threads == 2


def test_preset_fills_model_fields_and_explicit_keys_win():
    run = build_config({'preset': 'small', 'num_layers': 2})
    assert run.model.hidden_size == 256
    assert run.model.num_layers == 2


def test_integers_are_accepted_for_float_fields():
    assert build_config({'peak_lr': 1, 'final_lr': 0}).schedule.peak_lr == 1.0


@pytest.mark.parametrize('values, message', [
    ({'hiden_size': 3}, 'unknown configuration keys'),
    ({'num_layers': 2.5}, 'integer'),
    ({'packing': 'yes'}, 'true or false'),
    ({'norm_style': 3}, 'string'),
    ({'preset': 'giant'}, 'unknown preset'),
    ({'hidden_size': 30}, 'divisible'),
    ({'threads': 0}, 'threads'),
])
def test_invalid_values(values, message):
    with pytest.raises(ConfigError, match=message):
        build_config(values)


def test_file_errors(tmp_path):
    with pytest.raises(ConfigError, match='not found'):
        read_config_file(str(tmp_path / 'missing.toml'))
    with pytest.raises(ConfigError, match='tables'):
        read_config_file(write(tmp_path, '[model]\nhidden_size = 32\n'))
    with pytest.raises(ConfigError):
        read_config_file(write(tmp_path, 'hidden_size = = 3\n'))


def test_resolved_lines_are_sorted_and_complete():
    lines = build_config({}).resolved_lines()
    keys = [line.split(' = ')[0] for line in lines]
    assert keys == sorted(keys)
    assert {'hidden_size', 'probe_lr', 'finetune_lr', 'seed', 'strategy', 'total_steps'} <= set(keys)
    assert 'probe_seed' not in keys

import os

import pytest

from model import ModelConfig, init_model
from tokenizer import SPECIAL_TOKENS, Vocabulary

FIXTURES = os.path.join(os.path.dirname(__file__), 'fixtures')

WORDS = [
    'the', 'a', 'cat', 'dog', 'bird', 'fish', 'sat', 'ran', 'flew', 'swam', 'on', 'in', 'under',
    'over', 'mat', 'house', 'tree', 'pond', 'big', 'small', 'red', 'old', 'quickly', 'slowly',
    'and', 'then', 'good', 'bad', 'movie', 'was', 'very', 'play', '##ing', '##s', '##ed', '.',
]

SENTENCES = [
    'the cat sat on the mat .',
    'a dog ran under the old tree .',
    'the small bird flew over the house .',
    'a red fish swam in the pond .',
    'the old dog sat slowly on a mat .',
    'a big cat ran quickly and then sat .',
    'the bird sat in the red tree .',
    'a small fish swam under the big house .',
    'the dog and the cat ran over the pond .',
    'a bird flew slowly over the old mat .',
]


def fixture_path(name):
    return os.path.join(FIXTURES, name)


@pytest.fixture
def vocab():
    return Vocabulary(SPECIAL_TOKENS + WORDS)


def tiny_config(vocab_size, **overrides):
    values = dict(
        vocab_size=vocab_size, hidden_size=16, num_layers=2, num_heads=2, intermediate_size=24,
        max_length=16, dropout=0.0, attention_dropout=0.0,
    )
    values.update(overrides)
    return ModelConfig(**values).validate()


@pytest.fixture
def config(vocab):
    return tiny_config(len(vocab))


@pytest.fixture
def model(config):
    return init_model(config, seed=0).eval()

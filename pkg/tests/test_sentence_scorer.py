import math

import numpy as np
import pytest
import torch

from conftest import WORDS
from data_process import read_minimal_pairs
from errors import DatasetError, ShapeError
from sentence_scorer import MinimalPair, SentenceScorer, format_report, minimal_pair_eval


@pytest.fixture
def scorer(model, vocab):
    return SentenceScorer(model, vocab, batch_size=4)


@pytest.fixture
def uniform_scorer(model, vocab):
    with torch.no_grad():
        model.mlm_output.weight.zero_()
        model.mlm_output.bias.zero_()
    return SentenceScorer(model, vocab)


def test_one_token_sentence_is_a_single_masked_forward(scorer):
    (value,) = scorer.token_log_probs_naive('cat')
    assert scorer.score('cat') == pytest.approx(value, abs=1e-12)


def test_batched_scores_equal_the_naive_loop(scorer):
    rng = np.random.default_rng(0)
    words = [w for w in WORDS if not w.startswith('##')]
    for _ in range(50):
        sentence = ' '.join(rng.choice(words, size=int(rng.integers(1, 11))))
        assert scorer.score(sentence) == pytest.approx(scorer.score_naive(sentence), abs=1e-9)


def test_uniform_model_scores_minus_n_log_v(uniform_scorer, vocab):
    sentence = 'the cat sat on the mat .'
    n = len(vocab.encode(sentence))
    assert uniform_scorer.score(sentence) == pytest.approx(-n * math.log(len(vocab)), abs=1e-9)


def test_uniform_model_ties_every_pair(uniform_scorer):
    pairs = [MinimalPair('the cat sat', 'cat the sat', 'order'),
             MinimalPair('a dog ran', 'a ran dog', 'order'),
             MinimalPair('the bird flew', 'the bird swam', 'verb')]
    report, overall = minimal_pair_eval(uniform_scorer, pairs)
    assert overall == 0.5
    assert report['accuracy'].tolist() == [0.5, 0.5]


def test_identical_sentences_tie(scorer):
    assert scorer.compare(MinimalPair('the cat sat', 'the cat sat', 'same')) == 0.5


def test_report_groups_by_phenomenon(scorer):
    pairs = [MinimalPair('the cat sat', 'cat the sat', 'order')] * 2 + \
        [MinimalPair('a dog ran', 'a dog swam', 'verb')]
    report, overall = minimal_pair_eval(scorer, pairs)
    assert report['phenomenon'].tolist() == ['order', 'verb']
    assert report['pairs'].tolist() == [2, 1]
    assert overall == pytest.approx((2 * report['accuracy'][0] + report['accuracy'][1]) / 3)

    text = format_report(report, overall)
    assert text.splitlines()[0].split() == ['phenomenon', 'pairs', 'accuracy']
    assert text.splitlines()[-1].split()[:2] == ['overall', '3']


def test_scoring_errors(scorer):
    with pytest.raises(DatasetError):
        scorer.score('')
    with pytest.raises(ShapeError):
        scorer.score(' '.join(['cat'] * 20))
    with pytest.raises(DatasetError):
        minimal_pair_eval(scorer, [])


def test_read_minimal_pairs(tmp_path):
    path = tmp_path / 'pairs.tsv'
    path.write_text('order\tthe cat sat\tcat the sat\n\nverb\ta dog ran\ta dog swam\n', encoding='utf-8')
    pairs = read_minimal_pairs(str(path))
    assert pairs == [MinimalPair('the cat sat', 'cat the sat', 'order'), MinimalPair('a dog ran', 'a dog swam', 'verb')]

    path.write_text('order\tthe cat sat\tthe cat sat\n', encoding='utf-8')
    with pytest.raises(DatasetError, match='identical'):
        read_minimal_pairs(str(path))

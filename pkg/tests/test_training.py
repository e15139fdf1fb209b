import os
import random

import numpy as np
import pytest
import torch

import objectives
import training
from checkpoint import digest, load_checkpoint, load_optimizer, optimizer_path, save_checkpoint
from conftest import SENTENCES, tiny_config
from errors import ConfigError, DatasetError, TrainingAborted
from model import ModelConfig, init_model
from objectives import MaskingConfig
from optimizers import build_optimizer
from sentence_scorer import MinimalPair, SentenceScorer, minimal_pair_eval
from tokenizer import CLS_ID, SEP_ID
from training import (METRICS_FILE, BatchFactory, PretrainConfig, ScheduleConfig, encode_documents, exposure,
                      lr_at, pack_sequences, pretrain)


def short_run(seed=0, threads=1, **overrides):
    values = dict(short_seq_len=8, long_seq_len=16, tokens_per_step=32, phase_fraction=0.5,
                  checkpoint_every=2, seed=seed, threads=threads)
    values.update(overrides)
    return PretrainConfig(**values)


def short_schedule(total_steps=6):
    return ScheduleConfig(peak_lr=0.01, final_lr=0.001, warmup_steps=2, total_steps=total_steps)


@pytest.fixture
def documents(vocab):
    return encode_documents([SENTENCES[:5], SENTENCES[5:]], vocab)


def test_pack_sequences_fills_up_to_the_budget():
    sequences = pack_sequences([[[10, 11, 12], [13, 14]], [list(range(20, 30))]], seq_len=6)
    assert sequences == [
        [CLS_ID, 10, 11, 12, SEP_ID],
        [CLS_ID, 13, 14, SEP_ID],
        [CLS_ID, 20, 21, 22, 23, SEP_ID],
        [CLS_ID, 24, 25, 26, 27, SEP_ID],
        [CLS_ID, 28, 29, SEP_ID],
    ]


def test_pack_sequences_without_packing_truncates_each_sentence():
    sequences = pack_sequences([[[10, 11], list(range(20, 30))]], seq_len=6, packing=False)
    assert sequences == [[CLS_ID, 10, 11, SEP_ID], [CLS_ID, 20, 21, 22, 23, SEP_ID]]


def test_encode_documents(vocab):
    encoded = encode_documents([['the cat sat', ''], []], vocab)
    assert encoded == [[vocab.encode('the cat sat')]]
    with pytest.raises(DatasetError):
        encode_documents([[''], []], vocab)


def test_exposure():
    assert exposure(100, 4096, 409_600) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        exposure(1, 1, 0)


def test_pretrain_config_validation():
    assert PretrainConfig().validate(128).batch_size(32) == 128
    with pytest.raises(ConfigError, match='max_length'):
        PretrainConfig(long_seq_len=512, tokens_per_step=4096).validate(128)
    with pytest.raises(ConfigError, match='multiple'):
        PretrainConfig(tokens_per_step=100).validate()
    with pytest.raises(ConfigError):
        PretrainConfig(optimizer='sgd').validate()


def test_batch_factory_switches_sequence_length(documents, vocab):
    factory = BatchFactory(documents, vocab, MaskingConfig(), short_run(), total_steps=6)
    assert factory.boundary == 3
    assert [factory.seq_len(step) for step in range(6)] == [8, 8, 8, 16, 16, 16]
    assert factory(0).ids.shape[0] == 4
    assert factory(4).ids.shape[0] == 2
    assert factory(4).ids.shape[1] <= 16


def test_batch_factory_builds_pair_batches(documents, vocab):
    factory = BatchFactory(documents, vocab, MaskingConfig(), short_run(), 6, pair_objective='document')
    batch = factory(0)
    assert batch.nsp_labels.shape == (4,)
    assert batch.ids.shape[1] <= 8


def test_pretrain_writes_metrics_and_checkpoints(tmp_path, documents, vocab, config):
    model = init_model(config, seed=0)
    result = pretrain(model, documents, vocab, MaskingConfig(), short_schedule(), short_run(),
                      out_dir=str(tmp_path), quiet=True)

    assert list(result.history['step']) == [1, 2, 3, 4, 5, 6]
    assert np.isfinite(result.history['loss']).all()
    names = [os.path.basename(path) for path in result.checkpoints]
    assert names == ['checkpoint-2.safetensors', 'checkpoint-4.safetensors', 'model.safetensors']
    assert os.path.exists(optimizer_path(result.checkpoint))

    with open(tmp_path / METRICS_FILE, encoding='utf-8') as file:
        lines = file.read().splitlines()
    assert len(lines) == 6
    for index, line in enumerate(lines, start=1):
        step, lr, loss, grad_norm = line.split('\t')
        assert int(step) == index
        assert float(lr) == pytest.approx(lr_at(index, short_schedule()))
        assert float(loss) > 0 and float(grad_norm) >= 0


def run_digest(tmp_path, name, vocab, documents, **overrides):
    model = init_model(tiny_config(len(vocab), dropout=0.1, attention_dropout=0.1), seed=3)
    result = pretrain(model, documents, vocab, MaskingConfig(), short_schedule(), short_run(**{'seed': 5, **overrides}),
                      out_dir=str(tmp_path / name), quiet=True)
    return digest(result.checkpoint)


def test_pretraining_is_deterministic_per_seed(tmp_path, vocab, documents):
    first = run_digest(tmp_path, 'first', vocab, documents)
    assert run_digest(tmp_path, 'second', vocab, documents) == first
    assert run_digest(tmp_path, 'threaded', vocab, documents, threads=2) == first
    assert run_digest(tmp_path, 'other', vocab, documents, seed=6) != first


def test_checkpoint_round_trip_is_bitwise(tmp_path, documents, vocab, config):
    model = init_model(config, seed=1)
    result = pretrain(model, documents, vocab, MaskingConfig(), short_schedule(4), short_run(),
                      out_dir=str(tmp_path), quiet=True)
    loaded, step = load_checkpoint(result.checkpoint)
    assert step == 4
    ids = torch.tensor([[CLS_ID] + vocab.encode('the cat sat on a mat') + [SEP_ID]])
    assert torch.equal(loaded(ids).mlm_logits, result.model(ids).mlm_logits)
    assert digest(save_checkpoint(loaded, str(tmp_path / 'again.safetensors'))) == digest(result.checkpoint)


def test_optimizer_state_round_trip(tmp_path, documents, vocab, config):
    model = init_model(config, seed=1)
    result = pretrain(model, documents, vocab, MaskingConfig(), short_schedule(4), short_run(),
                      out_dir=str(tmp_path), quiet=True)
    fresh = build_optimizer(result.model, 'lamb', 0.01, 0.1)
    load_optimizer(fresh, result.model, optimizer_path(result.checkpoint))
    param = result.model.token_embedding.weight
    assert fresh.state[param]['exp_avg'].shape == param.shape
    assert int(fresh.state[param]['step']) == 4


def test_non_finite_loss_aborts_and_keeps_the_last_checkpoint(tmp_path, documents, vocab, config, monkeypatch):
    calls = []

    def poisoned(*args):
        calls.append(1)
        loss = objectives.total_loss(*args)
        return loss * float('nan') if len(calls) == 4 else loss

    monkeypatch.setattr(training, 'total_loss', poisoned)
    with pytest.raises(TrainingAborted) as excinfo:
        pretrain(init_model(config, seed=0), documents, vocab, MaskingConfig(), short_schedule(), short_run(),
                 out_dir=str(tmp_path), quiet=True)
    assert excinfo.value.step == 3
    assert os.path.basename(excinfo.value.last_checkpoint) == 'checkpoint-2.safetensors'
    assert os.path.exists(excinfo.value.last_checkpoint)


def test_batch_without_targets_skips_the_update(tmp_path, documents, vocab, config, monkeypatch):
    original = training.mlm_batch
    calls = []

    def empty_first(*args):
        batch = original(*args)
        calls.append(1)
        if len(calls) == 1:
            batch.targets.fill_(objectives.IGNORE)
        return batch

    monkeypatch.setattr(training, 'mlm_batch', empty_first)
    result = pretrain(init_model(config, seed=0), documents, vocab, MaskingConfig(), short_schedule(4), short_run(),
                      out_dir=str(tmp_path), quiet=True)
    assert result.history['step'].tolist() == [2, 3, 4]
    assert os.path.basename(result.checkpoint) == 'model.safetensors'
    lines = (tmp_path / METRICS_FILE).read_text(encoding='utf-8').splitlines()
    assert [line.split('\t')[0] for line in lines] == ['2', '3', '4']


def shuffled(sentence, rng):
    words = sentence.split()
    while True:
        candidate = words[:]
        rng.shuffle(candidate)
        if candidate != words:
            return ' '.join(candidate)


@pytest.mark.slow
def test_toy_model_memorizes_its_corpus(vocab):
    config = ModelConfig(vocab_size=len(vocab), hidden_size=64, num_layers=2, num_heads=4, intermediate_size=128,
                         max_length=16, dropout=0.0, attention_dropout=0.0).validate()
    model = init_model(config, seed=0)
    documents = encode_documents([[sentence] for sentence in SENTENCES], vocab)
    schedule = ScheduleConfig(peak_lr=3e-3, final_lr=3e-4, warmup_steps=20, total_steps=300)
    cfg = PretrainConfig(short_seq_len=12, long_seq_len=12, tokens_per_step=480, packing=False,
                         weight_decay=0.0, optimizer='adamw', seed=0)
    result = pretrain(model, documents, vocab, MaskingConfig(strategy='subword'), schedule, cfg, quiet=True)
    assert result.history['loss'].tail(20).mean() < 0.1

    rng = random.Random(0)
    pairs = [MinimalPair(sentence, shuffled(sentence, rng), 'word order')
             for sentence in SENTENCES for _ in range(10)]
    _, accuracy = minimal_pair_eval(SentenceScorer(result.model, vocab), pairs)
    assert accuracy >= 0.95

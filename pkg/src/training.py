"""
Learning-rate schedule, sequence packing and the two-phase pretraining loop.
"""
import logging
import math
import os
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import pandas as pd
import torch
from tqdm import tqdm

import numerics
from checkpoint import save_checkpoint
from errors import ConfigError, DatasetError, TrainingAborted
from objectives import batch_rng, make_pairs, mlm_batch, pair_batch, prefetch, total_loss
from optimizers import build_optimizer, clip_gradients, set_learning_rate
from tokenizer import CLS_ID, SEP_ID
from writer import output_to_file

logger = logging.getLogger(__name__)

METRICS_FILE = 'metrics.tsv'
FINAL_CHECKPOINT = 'model.safetensors'


@dataclass
class ScheduleConfig:
    kind: str = 'cosine'
    peak_lr: float = 0.01
    final_lr: float = 0.001
    warmup_steps: int = 500
    total_steps: int = 31250

    def validate(self):
        if self.kind not in ('cosine', 'linear'):
            raise ConfigError(f'schedule kind must be cosine or linear, got {self.kind!r}')
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ConfigError(
                f'warmup_steps ({self.warmup_steps}) must be below total_steps ({self.total_steps})'
            )
        if not 0.0 <= self.final_lr <= self.peak_lr:
            raise ConfigError(f'need 0 <= final_lr ({self.final_lr}) <= peak_lr ({self.peak_lr})')
        return self


def lr_at(step, cfg):
    """
    Linear warm-up to the peak, then cosine or linear decay to the final rate.
    """
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f'step {step} outside [0, {cfg.total_steps}]')
    if step < cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    progress = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    if cfg.kind == 'cosine':
        return cfg.final_lr + (cfg.peak_lr - cfg.final_lr) * (1.0 + math.cos(math.pi * progress)) / 2.0
    return cfg.peak_lr + (cfg.final_lr - cfg.peak_lr) * progress


@dataclass
class PretrainConfig:
    phase_fraction: float = 0.9
    short_seq_len: int = 32
    long_seq_len: int = 128
    tokens_per_step: int = 4096
    grad_clip: float = 2.0
    weight_decay: float = 0.1
    optimizer: str = 'lamb'
    checkpoint_every: int = 1000
    packing: bool = True
    seed: int = 0
    threads: int = 1

    def batch_size(self, seq_len):
        return self.tokens_per_step // seq_len

    def validate(self, max_length=None):
        if not 0.0 < self.phase_fraction <= 1.0:
            raise ConfigError(f'phase_fraction must lie in (0, 1], got {self.phase_fraction}')
        for seq_len in (self.short_seq_len, self.long_seq_len):
            if seq_len < 4:
                raise ConfigError(f'sequence length {seq_len} is too short')
            if self.tokens_per_step % seq_len:
                raise ConfigError(
                    f'tokens_per_step {self.tokens_per_step} is not a multiple of sequence length {seq_len}'
                )
            if max_length is not None and seq_len > max_length:
                raise ConfigError(f'sequence length {seq_len} exceeds the model max_length {max_length}')
        if self.optimizer not in ('lamb', 'adamw'):
            raise ConfigError(f'optimizer must be lamb or adamw, got {self.optimizer!r}')
        if self.grad_clip <= 0.0:
            raise ConfigError(f'grad_clip must be positive, got {self.grad_clip}')
        if self.checkpoint_every < 1:
            raise ConfigError(f'checkpoint_every must be positive, got {self.checkpoint_every}')
        return self


@dataclass
class PretrainResult:
    model: torch.nn.Module
    history: pd.DataFrame
    checkpoint: Optional[str] = None
    checkpoints: List[str] = field(default_factory=list)


def encode_documents(documents, vocab):
    """
    Token ids per sentence, grouped by document. Documents are sentence lists
    (as read back from a Markdown split) or MarkdownDoc objects. Empty
    sentences are dropped.
    """
    encoded = []
    for doc in documents:
        lines = doc.sentences if hasattr(doc, 'sentences') else doc
        sentences = [ids for ids in (vocab.encode(s) for s in lines) if ids]
        if sentences:
            encoded.append(sentences)
    if not encoded:
        raise DatasetError('the training corpus has no encodable sentences')
    return encoded


def pack_sequences(documents, seq_len, packing=True):
    """
    [CLS] ... [SEP] training sequences of at most seq_len ids.

    With packing, consecutive sentences of a document share a sequence until
    it is full; long sentences are cut. Without packing, every sentence is
    its own (truncated) sequence.
    """
    budget = seq_len - 2
    sequences = []
    for sentences in documents:
        chunk = []
        for ids in sentences:
            if not packing:
                sequences.append([CLS_ID] + ids[:budget] + [SEP_ID])
                continue
            for start in range(0, len(ids), budget):
                piece = ids[start:start + budget]
                if chunk and len(chunk) + len(piece) > budget:
                    sequences.append([CLS_ID] + chunk + [SEP_ID])
                    chunk = []
                chunk.extend(piece)
        if chunk:
            sequences.append([CLS_ID] + chunk + [SEP_ID])
    return sequences


def exposure(steps, tokens_per_step, corpus_subwords):
    """
    Average number of times each corpus subword is seen during training.
    """
    if corpus_subwords <= 0:
        raise ValueError('corpus_subwords must be positive')
    return steps * tokens_per_step / corpus_subwords


class BatchFactory:
    """
    Deterministic batch for each step index; safe to call from worker threads.
    """

    def __init__(self, documents, vocab, masking, cfg, total_steps, pair_objective='none'):
        self.documents = documents
        self.vocab = vocab
        self.masking = masking
        self.cfg = cfg
        self.boundary = int(round(cfg.phase_fraction * total_steps))
        self.pair_objective = pair_objective
        self.sequences = {
            seq_len: pack_sequences(documents, seq_len, cfg.packing)
            for seq_len in {cfg.short_seq_len, cfg.long_seq_len}
        }

    def seq_len(self, step):
        return self.cfg.short_seq_len if step < self.boundary else self.cfg.long_seq_len

    def __call__(self, step):
        seq_len = self.seq_len(step)
        size = self.cfg.batch_size(seq_len)
        rng = batch_rng(self.cfg.seed, step)
        if self.pair_objective != 'none':
            pairs = make_pairs(self.documents, self.pair_objective, rng, budget=seq_len - 3)
            return pair_batch([next(pairs) for _ in range(size)], self.vocab, self.masking, rng)
        sequences = self.sequences[seq_len]
        chosen = rng.integers(len(sequences), size=size)
        return mlm_batch([sequences[i] for i in chosen], self.vocab, self.masking, rng)


def _update(model, optimizer, batch, cfg, step, lr, generator, last_checkpoint):
    with numerics.float64():
        output = model(batch.ids, batch.segment_ids, batch.padding_mask, train=True, generator=generator)
        loss = total_loss(output.mlm_logits, batch.targets, output.nsp_logits, batch.nsp_labels)
    if not torch.isfinite(loss):
        raise TrainingAborted('non-finite loss', step, last_checkpoint)

    optimizer.zero_grad(set_to_none=True)
    numerics.backward(loss)
    try:
        grad_norm = clip_gradients(model.parameters(), cfg.grad_clip, step)
    except TrainingAborted as e:
        raise TrainingAborted('non-finite gradient', step, last_checkpoint) from e
    optimizer.step()
    return {'step': step + 1, 'lr': lr, 'loss': float(loss), 'grad_norm': grad_norm}


def pretrain(model, documents, vocab, masking, schedule, cfg, out_dir=None, quiet=False):
    """
    Plan -> corrupt -> forward -> loss -> backward -> clip -> step for
    schedule.total_steps steps, switching to the long sequence length after
    the phase boundary. `documents` are lists of sentence id lists.

    Raises TrainingAborted on a non-finite loss; the last good checkpoint stays
    on disk.
    """
    masking.validate()
    schedule.validate()
    cfg.validate(model.config.max_length)

    total_steps = schedule.total_steps
    factory = BatchFactory(documents, vocab, masking, cfg, total_steps, model.config.nsp_head)
    optimizer = build_optimizer(model, cfg.optimizer, schedule.peak_lr, cfg.weight_decay)
    generator = torch.Generator().manual_seed(int(cfg.seed))

    if out_dir is not None:
        output_to_file(METRICS_FILE, '', mode='w', directory=out_dir)

    rows = []
    checkpoints = []
    last_checkpoint = None
    model.train()
    progress = tqdm(
        prefetch(factory, range(total_steps), cfg.threads),
        total=total_steps, desc='pretrain', disable=quiet,
    )
    for step, batch in enumerate(progress):
        lr = lr_at(step + 1, schedule)
        set_learning_rate(optimizer, lr)

        if batch.num_targets:
            row = _update(model, optimizer, batch, cfg, step, lr, generator, last_checkpoint)
            rows.append(row)
            progress.set_postfix(loss=f'{row["loss"]:.4f}', lr=f'{lr:.2e}')
            if out_dir is not None:
                output_to_file(
                    METRICS_FILE,
                    f'{row["step"]}\t{lr:.10g}\t{row["loss"]:.10g}\t{row["grad_norm"]:.10g}\n',
                    mode='a', directory=out_dir,
                )
        else:
            # Short sequences can draw an empty plan.
            logger.warning(f'Step {step + 1}: no masked positions, update skipped')

        if out_dir is not None:
            if (step + 1) % cfg.checkpoint_every == 0 and step + 1 < total_steps:
                last_checkpoint = save_checkpoint(
                    model, os.path.join(out_dir, f'checkpoint-{step + 1}.safetensors'), step + 1, optimizer
                )
                checkpoints.append(last_checkpoint)
        if step + 1 == factory.boundary and factory.boundary < total_steps:
            logger.info(f'Step {step + 1}: switching to sequence length {cfg.long_seq_len}')

    model.eval()
    if out_dir is not None:
        last_checkpoint = save_checkpoint(model, os.path.join(out_dir, FINAL_CHECKPOINT), total_steps, optimizer)
        checkpoints.append(last_checkpoint)

    history = pd.DataFrame(rows, columns=['step', 'lr', 'loss', 'grad_norm'])
    if len(history):
        logger.info(f'Finished {total_steps} steps; final loss {history["loss"].iloc[-1]:.4f}')
    return PretrainResult(model, history, last_checkpoint, checkpoints)


def corpus_subwords(documents):
    return int(np.sum([len(ids) for sentences in documents for ids in sentences]))

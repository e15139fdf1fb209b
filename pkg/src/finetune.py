import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from torch import nn
from tqdm import tqdm

import numerics
from errors import ConfigError, DatasetError
from evaluation import Evaluation
from optimizers import ADAMW_BETAS, EPS, clip_gradients, parameter_groups, set_learning_rate
from tokenizer import PAD_ID, build_inputs
from training import ScheduleConfig, lr_at

logger = logging.getLogger(__name__)

TASKS = ('single', 'pair', 'regression')


@dataclass
class FinetuneConfig:
    batch_size: int = 32
    dropout: float = 0.1
    warmup_fraction: float = 0.1
    lr: float = 3e-5
    weight_decay: float = 0.01
    epochs: int = 3
    max_length: int = 128
    grad_clip: float = 2.0
    seed: int = 0

    def validate(self):
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ConfigError(f'warmup_fraction must lie in [0, 1), got {self.warmup_fraction}')
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError('epochs and batch_size must be positive')
        if self.max_length < 3:
            raise ConfigError(f'max_length {self.max_length} is too short')
        return self


class SequenceClassifier(nn.Module):
    """
    Encoder plus an MLP on the final [CLS] state. One output for regression.
    """

    def __init__(self, encoder, num_outputs, dropout=0.1):
        super().__init__()
        d = encoder.config.hidden_size
        self.encoder = encoder
        self.dropout = dropout
        self.dense = nn.Linear(d, d, dtype=numerics.DTYPE)
        self.norm = nn.LayerNorm(d, eps=numerics.LAYER_NORM_EPS, dtype=numerics.DTYPE)
        self.output = nn.Linear(d, num_outputs, dtype=numerics.DTYPE)

    def forward(self, ids, segment_ids=None, padding_mask=None, train=False, generator=None):
        state = self.encoder(ids, segment_ids, padding_mask, train, generator).final_state[:, 0]
        hidden = self.norm(numerics.gelu(self.dense(numerics.dropout(state, self.dropout, train, generator))))
        return self.output(numerics.dropout(hidden, self.dropout, train, generator))


def infer_task(df):
    if pd.api.types.is_float_dtype(df['label']) and not df['label'].dropna().apply(float.is_integer).all():
        return 'regression'
    return 'pair' if 'text_b' in df.columns and df['text_b'].notna().any() else 'single'


def encode_dataset(df, vocab, max_length):
    """
    [CLS] a [SEP] (b [SEP]) rows and the share of rows that had to be truncated.
    """
    rows = []
    truncated = 0
    has_pair = 'text_b' in df.columns
    for record in df.itertuples(index=False):
        b = vocab.encode(record.text_b) if has_pair and isinstance(record.text_b, str) else None
        ids, segments, cut = build_inputs(vocab.encode(record.text_a), b, max_length)
        rows.append((ids, segments))
        truncated += cut
    return rows, truncated / max(len(rows), 1)


def _collate(rows, indices):
    width = max(len(rows[i][0]) for i in indices)
    ids = torch.full((len(indices), width), PAD_ID, dtype=torch.int64)
    segments = torch.zeros((len(indices), width), dtype=torch.int64)
    for row, i in enumerate(indices):
        ids[row, :len(rows[i][0])] = torch.tensor(rows[i][0])
        segments[row, :len(rows[i][1])] = torch.tensor(rows[i][1])
    padding = torch.zeros_like(ids, dtype=torch.bool)
    for row, i in enumerate(indices):
        padding[row, len(rows[i][0]):] = True
    return ids, segments, padding


@dataclass
class FinetuneResult:
    classifier: SequenceClassifier
    metrics: dict
    truncated_share: float
    predictions: Optional[np.ndarray] = None


class ModelFineTune:
    """
    Fine-tune the whole encoder with a classifier head on a labelled
    single-segment, segment-pair or regression dataset.
    """

    def __init__(self, model, vocab, cfg=None, task=None):
        self.model = model
        self.vocab = vocab
        self.cfg = (cfg or FinetuneConfig()).validate()
        self.task = task
        if task is not None and task not in TASKS:
            raise ConfigError(f'task must be one of {TASKS}, got {task!r}')

    @property
    def max_length(self):
        """
        Inputs never exceed what the encoder can position.
        """
        return min(self.cfg.max_length, self.model.config.max_length)

    def num_outputs(self, df):
        if self.task == 'regression':
            return 1
        return int(df['label'].max()) + 1

    def targets(self, df):
        if self.task == 'regression':
            return torch.tensor(df['label'].to_numpy(dtype=np.float64))
        return torch.tensor(df['label'].to_numpy(dtype=np.int64))

    def loss(self, logits, targets):
        if self.task == 'regression':
            return F.mse_loss(logits[:, 0], targets)
        return numerics.cross_entropy(logits, targets)

    @torch.no_grad()
    def predict(self, classifier, rows):
        classifier.eval()
        outputs = []
        for start in range(0, len(rows), self.cfg.batch_size):
            indices = list(range(start, min(start + self.cfg.batch_size, len(rows))))
            with numerics.float64():
                logits = classifier(*_collate(rows, indices))
            outputs.append(logits[:, 0] if self.task == 'regression' else logits.argmax(dim=-1))
        return torch.cat(outputs).numpy()

    def train(self, train_df, eval_df=None, directory=None, name='finetune', quiet=True):
        if train_df is None or len(train_df) == 0:
            raise DatasetError('empty fine-tuning dataset')
        if self.task is None:
            self.task = infer_task(train_df)
        cfg = self.cfg

        rows, truncated_share = encode_dataset(train_df, self.vocab, self.max_length)
        targets = self.targets(train_df)
        num_outputs = self.num_outputs(train_df if eval_df is None else pd.concat([train_df, eval_df]))

        torch.manual_seed(cfg.seed)
        classifier = SequenceClassifier(self.model, num_outputs, cfg.dropout)
        optimizer = torch.optim.AdamW(
            parameter_groups(classifier, cfg.weight_decay), lr=cfg.lr, betas=ADAMW_BETAS, eps=EPS
        )
        total = math.ceil(len(rows) / cfg.batch_size) * cfg.epochs
        schedule = ScheduleConfig(kind='linear', peak_lr=cfg.lr, final_lr=0.0,
                                  warmup_steps=int(cfg.warmup_fraction * total), total_steps=total)
        rng = np.random.default_rng(cfg.seed)
        generator = torch.Generator().manual_seed(int(cfg.seed))

        step = 0
        for _ in tqdm(range(cfg.epochs), desc='finetune', disable=quiet):
            classifier.train()
            order = rng.permutation(len(rows))
            for start in range(0, len(order), cfg.batch_size):
                indices = order[start:start + cfg.batch_size].tolist()
                set_learning_rate(optimizer, lr_at(step + 1, schedule))
                with numerics.float64():
                    logits = classifier(*_collate(rows, indices), train=True, generator=generator)
                loss = self.loss(logits, targets[indices])
                optimizer.zero_grad(set_to_none=True)
                numerics.backward(loss)
                clip_gradients(classifier.parameters(), cfg.grad_clip, step)
                optimizer.step()
                step += 1

        held_out = train_df if eval_df is None else eval_df
        eval_rows, eval_truncated = encode_dataset(held_out, self.vocab, self.max_length)
        predictions = self.predict(classifier, eval_rows)
        labels = held_out['label'].to_numpy()
        metrics = Evaluation(labels, predictions, self.task, name).evaluate(
            directory, extra={'truncated_share': eval_truncated}
        )
        logger.info(f'Fine-tuned {step} steps on {len(rows)} examples: {metrics}')
        return FinetuneResult(classifier, metrics, truncated_share, predictions)


def finetune_classifier(model, vocab, train_df, cfg=None, eval_df=None, task=None, directory=None, quiet=True):
    return ModelFineTune(model, vocab, cfg, task).train(train_df, eval_df, directory, quiet=quiet)

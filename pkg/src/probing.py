"""
Edge probing on frozen layer contributions.

A probe mixes the per-layer contributions with softmax weights, projects
them down, pools each labelled span with multi-head attention against
learned queries and classifies the pooled vector(s) with a one-hidden-layer
MLP. The encoder is never updated.
"""
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd
import torch
from safetensors import safe_open
from safetensors.torch import save_file
from scipy import stats
from torch import nn
from tqdm import tqdm

import numerics
from errors import CheckpointError, ConfigError, DatasetError
from optimizers import ADAMW_BETAS, EPS, clip_gradients, set_learning_rate
from tokenizer import CLS_ID, SEP_ID
from training import ScheduleConfig, lr_at
from writer import atomic_path

logger = logging.getLogger(__name__)

PROBE_FORMAT = 'probe-1'


@dataclass
class ProbeExample:
    ids: List[int]
    span1: Tuple[int, int]
    label: int
    span2: Optional[Tuple[int, int]] = None

    def validate(self):
        for span in (self.span1, self.span2):
            if span is None:
                continue
            start, end = span
            if not 0 <= start < end <= len(self.ids):
                raise DatasetError(f'span {span} outside a sequence of {len(self.ids)} tokens')
        return self


@dataclass
class ProbeConfig:
    probe_dim: int = 256
    pool_heads: int = 4
    hidden_size: int = 256
    dropout: float = 0.25
    lr: float = 6e-3
    weight_decay: float = 0.01
    batch_size: int = 128
    epochs: int = 5
    grad_clip: float = 2.0
    seed: int = 0

    def validate(self):
        if self.probe_dim % self.pool_heads:
            raise ConfigError(f'probe_dim {self.probe_dim} is not divisible by pool_heads {self.pool_heads}')
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError('epochs and batch_size must be positive')
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f'dropout must lie in [0, 1), got {self.dropout}')
        return self


class AttentionPool(nn.Module):
    """
    Scaled dot-product attention of learned per-head queries over the span's
    token vectors. Values are the token vectors themselves.
    """

    def __init__(self, size, heads):
        super().__init__()
        self.heads = heads
        self.head_dim = size // heads
        self.key = nn.Linear(size, size, bias=False, dtype=numerics.DTYPE)
        self.query = nn.Parameter(torch.randn(heads, self.head_dim, dtype=numerics.DTYPE) * 0.02)

    def forward(self, x, span_mask):
        """
        x: batch×T×size, span_mask: batch×T (True inside the span).
        """
        batch, length, _ = x.shape
        keys = self.key(x).reshape(batch, length, self.heads, self.head_dim)
        scores = torch.einsum('bthd,hd->bht', keys, self.query) / math.sqrt(self.head_dim)
        scores = numerics.masked_fill(scores, ~span_mask[:, None, :], float('-inf'))
        weights = numerics.softmax(scores)
        values = x.reshape(batch, length, self.heads, self.head_dim)
        pooled = torch.einsum('bht,bthd->bhd', weights, values)
        return pooled.reshape(batch, -1)


class EdgeProbe(nn.Module):
    def __init__(self, num_layers, hidden_size, num_classes, cfg, pair=False):
        super().__init__()
        self.cfg = cfg
        self.layer_logits = nn.Parameter(torch.zeros(num_layers, dtype=numerics.DTYPE))
        self.downsample = nn.Linear(hidden_size, cfg.probe_dim, dtype=numerics.DTYPE)
        self.pool1 = AttentionPool(cfg.probe_dim, cfg.pool_heads)
        self.pool2 = AttentionPool(cfg.probe_dim, cfg.pool_heads) if pair else None
        width = cfg.probe_dim * (2 if pair else 1)
        self.hidden = nn.Linear(width, cfg.hidden_size, dtype=numerics.DTYPE)
        self.classifier = nn.Linear(cfg.hidden_size, num_classes, dtype=numerics.DTYPE)

    @property
    def gamma(self):
        return numerics.softmax(self.layer_logits)

    def mix(self, layers):
        """
        Convex combination over the layer axis of batch×K×T×d.
        """
        return torch.einsum('k,bktd->btd', self.gamma, layers)

    def forward(self, layers, span1_mask, span2_mask=None, train=False, generator=None):
        x = self.downsample(self.mix(layers))
        x = numerics.dropout(x, self.cfg.dropout, train, generator)
        pooled = self.pool1(x, span1_mask)
        if self.pool2 is not None:
            pooled = numerics.concat([pooled, self.pool2(x, span2_mask)])
        hidden = numerics.dropout(numerics.gelu(self.hidden(pooled)), self.cfg.dropout, train, generator)
        return self.classifier(hidden)


@torch.no_grad()
def layer_representations(model, examples):
    """
    [embedding output, s_1, ..., s_K] for every example, computed once with
    the encoder frozen; spans shift by one for the leading [CLS].
    """
    model.eval()
    reps = []
    for example in examples:
        ids = torch.tensor([[CLS_ID] + list(example.ids) + [SEP_ID]], dtype=torch.int64)
        with numerics.float64():
            output = model(ids)
        reps.append(torch.stack([output.embedding_output[0]] + [s[0] for s in output.contributions]))
    return reps


def _span_mask(spans, width):
    mask = torch.zeros(len(spans), width, dtype=torch.bool)
    for row, (start, end) in enumerate(spans):
        mask[row, start + 1:end + 1] = True
    return mask


def _collate(reps, examples, indices):
    width = max(reps[i].shape[1] for i in indices)
    layers = torch.zeros(len(indices), reps[indices[0]].shape[0], width, reps[indices[0]].shape[2],
                         dtype=numerics.DTYPE)
    for row, i in enumerate(indices):
        layers[row, :, :reps[i].shape[1]] = reps[i]
    span1 = _span_mask([examples[i].span1 for i in indices], width)
    span2 = None
    if examples[indices[0]].span2 is not None:
        span2 = _span_mask([examples[i].span2 for i in indices], width)
    labels = torch.tensor([examples[i].label for i in indices], dtype=torch.int64)
    return layers, span1, span2, labels


@dataclass
class ProbeResult:
    probe: EdgeProbe
    accuracy: float
    history: pd.DataFrame = field(default_factory=pd.DataFrame)


def _check(examples):
    if not examples:
        raise DatasetError('no probe examples')
    pair = examples[0].span2 is not None
    for example in examples:
        example.validate()
        if (example.span2 is not None) != pair:
            raise DatasetError('probe examples mix single-span and span-pair items')
    return pair


@torch.no_grad()
def probe_accuracy(probe, reps, examples, batch_size=128):
    correct = 0
    for start in range(0, len(examples), batch_size):
        indices = list(range(start, min(start + batch_size, len(examples))))
        layers, span1, span2, labels = _collate(reps, examples, indices)
        logits = probe(layers, span1, span2)
        correct += int((logits.argmax(dim=-1) == labels).sum())
    return correct / len(examples)


def probe_train(model, examples, cfg, num_classes=None, eval_examples=None, quiet=True):
    """
    Train an EdgeProbe on frozen representations of `model`; returns the probe
    and its accuracy on `eval_examples` (the training examples when omitted).
    """
    cfg.validate()
    pair = _check(examples)
    if eval_examples:
        _check(eval_examples)
    if num_classes is None:
        num_classes = 1 + max(e.label for e in list(examples) + list(eval_examples or []))

    reps = layer_representations(model, examples)
    torch.manual_seed(cfg.seed)
    probe = EdgeProbe(reps[0].shape[0], model.config.hidden_size, num_classes, cfg, pair)
    optimizer = torch.optim.AdamW(
        probe.parameters(), lr=cfg.lr, betas=ADAMW_BETAS, eps=EPS, weight_decay=cfg.weight_decay
    )
    steps_per_epoch = math.ceil(len(examples) / cfg.batch_size)
    schedule = ScheduleConfig(kind='cosine', peak_lr=cfg.lr, final_lr=0.0,
                              warmup_steps=0, total_steps=steps_per_epoch * cfg.epochs)
    rng = np.random.default_rng(cfg.seed)
    generator = torch.Generator().manual_seed(int(cfg.seed))

    rows = []
    step = 0
    for epoch in tqdm(range(cfg.epochs), desc='probe', disable=quiet):
        order = rng.permutation(len(examples))
        for start in range(0, len(order), cfg.batch_size):
            indices = order[start:start + cfg.batch_size].tolist()
            layers, span1, span2, labels = _collate(reps, examples, indices)
            set_learning_rate(optimizer, lr_at(step, schedule))
            logits = probe(layers, span1, span2, train=True, generator=generator)
            loss = numerics.cross_entropy(logits, labels)
            optimizer.zero_grad(set_to_none=True)
            numerics.backward(loss)
            clip_gradients(probe.parameters(), cfg.grad_clip, step)
            optimizer.step()
            rows.append({'epoch': epoch, 'step': step, 'loss': float(loss)})
            step += 1

    probe.eval()
    if eval_examples:
        accuracy = probe_accuracy(probe, layer_representations(model, eval_examples), eval_examples, cfg.batch_size)
    else:
        accuracy = probe_accuracy(probe, reps, examples, cfg.batch_size)
    logger.info(f'Probe accuracy {accuracy:.4f} after {step} steps')
    return ProbeResult(probe, accuracy, pd.DataFrame(rows))


def save_probe(probe, path):
    metadata = {
        'format_version': PROBE_FORMAT,
        'config': json.dumps(dataclasses.asdict(probe.cfg), sort_keys=True),
        'num_layers': str(probe.layer_logits.numel()),
        'hidden_size': str(probe.downsample.in_features),
        'num_classes': str(probe.classifier.out_features),
        'pair': str(probe.pool2 is not None),
    }
    tensors = {name: t.detach().contiguous().clone() for name, t in probe.state_dict().items()}
    with atomic_path(path) as tmp:
        save_file(tensors, tmp, metadata=metadata)
    return path


def load_probe(path):
    try:
        with safe_open(path, framework='pt') as file:
            metadata = file.metadata() or {}
            tensors = {name: file.get_tensor(name) for name in file.keys()}
    except Exception as e:
        raise CheckpointError(f'unreadable probe file {path}: {e}') from e
    if metadata.get('format_version') != PROBE_FORMAT:
        raise CheckpointError(f'{path} is not a probe file')
    cfg = ProbeConfig(**json.loads(metadata['config']))
    probe = EdgeProbe(int(metadata['num_layers']), int(metadata['hidden_size']),
                      int(metadata['num_classes']), cfg, metadata['pair'] == 'True')
    probe.load_state_dict(tensors)
    return probe.eval()


def layer_report(probe):
    """
    Layer weights in percent and the least-squares slope of weight against
    layer index. A single layer has slope 0.
    """
    gamma = 100.0 * probe.gamma.detach().numpy()
    if len(gamma) < 2:
        return gamma, 0.0
    fit = stats.linregress(np.arange(len(gamma), dtype=np.float64), gamma)
    return gamma, float(fit.slope)


def format_layer_report(gamma, slope, task=''):
    cells = ' '.join(f'{g:6.2f}' for g in gamma)
    return f'{task}\t{cells}\tslope {slope:+.2f}\n'

"""
Encoder for small-corpus masked language modelling.

Disentangled relative attention with shared content/position projections,
GEGLU feed-forward blocks and NormFormer-style normalization, plus the
switches needed to ablate each of them.
"""
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional

import torch
from torch import nn

import numerics
from errors import ConfigError, ShapeError

logger = logging.getLogger(__name__)

NORM_STYLES = ('normformer', 'pre', 'post')
ACTIVATIONS = ('geglu', 'gelu')
POSITIONS = ('relative', 'absolute')
NSP_HEADS = ('none', 'document', 'order')


@dataclass
class ModelConfig:
    vocab_size: int = 1024
    hidden_size: int = 64
    num_layers: int = 2
    num_heads: int = 4
    # Already reduced by 2/3 when activation is geglu.
    intermediate_size: int = 128
    max_length: int = 128
    dropout: float = 0.1
    attention_dropout: float = 0.1
    norm_style: str = 'normformer'
    activation: str = 'geglu'
    positions: str = 'relative'
    ff_init_scaling: bool = True
    ff_biases: bool = False
    nsp_head: str = 'none'

    @property
    def head_dim(self):
        return self.hidden_size // self.num_heads

    @property
    def ff_width(self):
        if self.activation == 'gelu':
            return round(1.5 * self.intermediate_size)
        return self.intermediate_size

    def validate(self):
        for name in ('vocab_size', 'hidden_size', 'num_layers', 'num_heads', 'intermediate_size', 'max_length'):
            if getattr(self, name) < 1:
                raise ConfigError(f'{name} must be positive, got {getattr(self, name)}')
        if self.hidden_size % self.num_heads:
            raise ConfigError(
                f'hidden_size {self.hidden_size} is not divisible by num_heads {self.num_heads}'
            )
        for name, allowed in (('norm_style', NORM_STYLES), ('activation', ACTIVATIONS),
                              ('positions', POSITIONS), ('nsp_head', NSP_HEADS)):
            if getattr(self, name) not in allowed:
                raise ConfigError(f'{name} must be one of {allowed}, got {getattr(self, name)!r}')
        for name in ('dropout', 'attention_dropout'):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f'{name} must lie in [0, 1), got {getattr(self, name)}')
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(values) - names)
        if unknown:
            raise ConfigError(f'unknown model config keys: {unknown}')
        return cls(**values).validate()


PRESETS = {
    'tiny': dict(hidden_size=64, num_layers=2, num_heads=4, intermediate_size=128, max_length=128),
    'small': dict(hidden_size=256, num_layers=4, num_heads=4, intermediate_size=683, max_length=128),
    'base': dict(hidden_size=768, num_layers=12, num_heads=12, intermediate_size=2048,
                 max_length=512, vocab_size=16384),
}


def preset(name, **overrides):
    if name not in PRESETS:
        raise ConfigError(f'unknown preset {name!r}; choose from {sorted(PRESETS)}')
    return ModelConfig(**{**PRESETS[name], **overrides}).validate()


def relative_index(i, j, max_length):
    """
    1-based row of the relative position table used by query i and key j.
    """
    if not (0 <= i < max_length and 0 <= j < max_length):
        raise ValueError(f'positions ({i}, {j}) outside [0, {max_length})')
    return max_length - i + j


def relative_rows(length, max_length):
    """
    0-based table rows for every (query, key) pair of a length-T sequence.
    """
    positions = torch.arange(length)
    return (max_length - 1) - positions[:, None] + positions[None, :]


@dataclass
class ModelOutput:
    embedding_output: torch.Tensor
    per_layer_states: List[torch.Tensor]
    contributions: List[torch.Tensor]
    mlm_logits: torch.Tensor
    nsp_logits: Optional[torch.Tensor] = None
    attention_probs: List[torch.Tensor] = field(default_factory=list)

    @property
    def final_state(self):
        return self.per_layer_states[-1] if self.per_layer_states else self.embedding_output


def _linear(fan_in, fan_out, bias=False):
    return nn.Linear(fan_in, fan_out, bias=bias, dtype=numerics.DTYPE)


def _norm(size):
    return nn.LayerNorm(size, eps=numerics.LAYER_NORM_EPS, dtype=numerics.DTYPE)


class Attention(nn.Module):
    """
    Multi-head attention without biases. In the relative variant the query and
    key projections are applied to both the content stream and the shared
    position table, so the parameter count equals standard attention's.
    """

    def __init__(self, config):
        super().__init__()
        self.config = config
        d = config.hidden_size
        self.query = _linear(d, d)
        self.key = _linear(d, d)
        self.value = _linear(d, d)
        self.output = _linear(d, d)

    def _heads(self, x):
        return x.reshape(*x.shape[:-1], self.config.num_heads, self.config.head_dim)

    def scores(self, hidden, position_table=None):
        """
        Pre-softmax scores, batch×heads×T×T.
        """
        q = self._heads(numerics.matmul(hidden, self.query.weight.T))
        k = self._heads(numerics.matmul(hidden, self.key.weight.T))
        content = torch.einsum('bihd,bjhd->bhij', q, k)
        if position_table is None:
            return content / math.sqrt(self.config.head_dim)

        length = hidden.shape[1]
        rows = relative_rows(length, self.config.max_length)
        position_query = self._heads(numerics.matmul(position_table, self.query.weight.T))
        position_key = self._heads(numerics.matmul(position_table, self.key.weight.T))
        # [i, j] holds pK at row(i, j) and pQ at row(j, i)
        key_at = position_key[rows]
        query_at = position_query[rows.T]
        content_to_position = torch.einsum('bihd,ijhd->bhij', q, key_at)
        position_to_content = torch.einsum('ijhd,bjhd->bhij', query_at, k)
        total = content + content_to_position + position_to_content
        return total / math.sqrt(3 * self.config.head_dim)

    def forward(self, hidden, position_table=None, padding_mask=None, train=False, generator=None):
        scores = self.scores(hidden, position_table)
        if padding_mask is not None:
            blocked = padding_mask[:, None, None, :]
            scores = numerics.masked_fill(scores, blocked, float('-inf'))
            # Rows with every key blocked would softmax to NaN.
            empty = blocked.all(dim=-1, keepdim=True)
            scores = numerics.masked_fill(scores, empty, 0.0)
            probs = numerics.masked_fill(numerics.softmax(scores), blocked, 0.0)
        else:
            probs = numerics.softmax(scores)

        dropped = numerics.dropout(probs, self.config.attention_dropout, train, generator)
        v = self._heads(numerics.matmul(hidden, self.value.weight.T))
        context = torch.einsum('bhij,bjhd->bihd', dropped, v)
        context = context.reshape(*hidden.shape)
        return numerics.matmul(context, self.output.weight.T), probs


class FeedForward(nn.Module):
    def __init__(self, config):
        super().__init__()
        self.activation = config.activation
        d, m = config.hidden_size, config.ff_width
        self.up = _linear(d, m, config.ff_biases)
        self.gate = _linear(d, m, config.ff_biases) if config.activation == 'geglu' else None
        self.down = _linear(m, d, config.ff_biases)

    def forward(self, x):
        hidden = numerics.gelu(self.up(x))
        if self.gate is not None:
            hidden = numerics.multiply(hidden, self.gate(x))
        return self.down(hidden)


class EncoderLayer(nn.Module):
    def __init__(self, config):
        super().__init__()
        self.config = config
        self.attention = Attention(config)
        self.feed_forward = FeedForward(config)
        count = 4 if config.norm_style == 'normformer' else 2
        self.norms = nn.ModuleList(_norm(config.hidden_size) for _ in range(count))

    def forward(self, x, position_table=None, padding_mask=None, train=False, generator=None):
        """
        Returns the layer output, its residual contribution out - x and the
        attention probabilities.
        """
        rate = self.config.dropout

        def attend(h):
            return self.attention(h, position_table, padding_mask, train, generator)

        def drop(h):
            return numerics.dropout(h, rate, train, generator)

        style = self.config.norm_style
        if style == 'normformer':
            attended, probs = attend(self.norms[0](x))
            mid = x + drop(self.norms[1](attended))
            out = mid + drop(self.norms[3](self.feed_forward(self.norms[2](mid))))
        elif style == 'pre':
            attended, probs = attend(self.norms[0](x))
            mid = x + drop(attended)
            out = mid + drop(self.feed_forward(self.norms[1](mid)))
        else:
            attended, probs = attend(x)
            mid = self.norms[0](x + drop(attended))
            out = self.norms[1](mid + drop(self.feed_forward(mid)))
        return out, out - x, probs


class MaskedLanguageModel(nn.Module):
    """
    Token (+ position, + segment) embeddings, a stack of encoder layers and
    the masked-token head; optionally a two-way sentence-pair head.
    """

    def __init__(self, config):
        super().__init__()
        self.config = config.validate()
        d = config.hidden_size

        self.token_embedding = nn.Embedding(config.vocab_size, d, dtype=numerics.DTYPE)
        if config.positions == 'relative':
            self.position_table = nn.Parameter(torch.zeros(2 * config.max_length - 1, d, dtype=numerics.DTYPE))
            self.absolute_position_embedding = None
        else:
            self.position_table = None
            self.absolute_position_embedding = nn.Embedding(config.max_length, d, dtype=numerics.DTYPE)
        if config.nsp_head != 'none':
            self.segment_embedding = nn.Embedding(2, d, dtype=numerics.DTYPE)
        else:
            self.segment_embedding = None
        self.embedding_norm = _norm(d)

        self.layers = nn.ModuleList(EncoderLayer(config) for _ in range(config.num_layers))

        self.mlm_transform = _linear(d, d, bias=True)
        self.mlm_norm = _norm(d)
        self.mlm_output = _linear(d, config.vocab_size, bias=True)
        self.nsp_classifier = _linear(d, 2, bias=True) if config.nsp_head != 'none' else None

    def embed(self, ids, segment_ids=None, train=False, generator=None):
        x = numerics.embedding(ids, self.token_embedding.weight)
        if self.absolute_position_embedding is not None:
            x = x + self.absolute_position_embedding.weight[:ids.shape[1]]
        if self.segment_embedding is not None:
            if segment_ids is None:
                segment_ids = torch.zeros_like(ids)
            x = x + numerics.embedding(segment_ids, self.segment_embedding.weight)
        return numerics.dropout(self.embedding_norm(x), self.config.dropout, train, generator)

    def forward(self, ids, segment_ids=None, padding_mask=None, train=False, generator=None):
        if ids.dim() != 2:
            raise ShapeError(f'forward: ids must be batch×T, got {tuple(ids.shape)}')
        if ids.shape[1] > self.config.max_length:
            raise ShapeError(f'forward: length {ids.shape[1]} exceeds max_length {self.config.max_length}')

        x = self.embed(ids, segment_ids, train, generator)
        embedding_output = x
        states, contributions, probs = [], [], []
        for layer in self.layers:
            x, contribution, layer_probs = layer(x, self.position_table, padding_mask, train, generator)
            states.append(x)
            contributions.append(contribution)
            probs.append(layer_probs)

        head = self.mlm_norm(numerics.gelu(self.mlm_transform(x)))
        mlm_logits = self.mlm_output(head)
        nsp_logits = self.nsp_classifier(x[:, 0]) if self.nsp_classifier is not None else None
        return ModelOutput(embedding_output, states, contributions, mlm_logits, nsp_logits, probs)


def init_std(hidden_size):
    return math.sqrt(2.0 / (5.0 * hidden_size))


def ff_scale(layer_index):
    return 1.0 / math.sqrt(2.0 * (layer_index + 1))


def init_model(config, seed):
    """
    Fresh model with every weight matrix drawn from N(0, sqrt(2 / 5d)).
    With ff_init_scaling the feed-forward matrices of layer l are further
    scaled by 1 / sqrt(2 (l + 1)). Normalization gains start at 1, biases at 0.
    """
    config.validate()
    model = MaskedLanguageModel(config)
    generator = torch.Generator().manual_seed(int(seed))
    std = init_std(config.hidden_size)

    with torch.no_grad():
        for name, param in model.named_parameters():
            if param.dim() >= 2:
                param.normal_(0.0, std, generator=generator)
            elif '.norms.' in name or 'norm.' in name:
                param.fill_(1.0 if name.endswith('weight') else 0.0)
            else:
                param.zero_()

        if config.ff_init_scaling:
            for index, layer in enumerate(model.layers):
                scale = ff_scale(index)
                for param in layer.feed_forward.parameters():
                    if param.dim() >= 2:
                        param.mul_(scale)

    logger.info(f'Initialized model with {parameter_count(model):,} parameters (seed {seed}).')
    return model


def parameter_count(model):
    return sum(param.numel() for param in model.parameters())

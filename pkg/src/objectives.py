"""
Corruption plans for masked-token training (subword, whole-word and span
masking), sentence-pair sampling for the auxiliary objectives, batch
assembly and the combined loss.
"""
import itertools
import logging
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
import torch

import numerics
from errors import ConfigError, DatasetError, MaskingError
from tokenizer import CLS_ID, MASK_ID, PAD_ID, SEP_ID, SPECIAL_TOKENS, truncate_pair, word_spans

logger = logging.getLogger(__name__)

MASK, RANDOM, KEEP = 'mask', 'random', 'keep'
ACTIONS = (MASK, RANDOM, KEEP)
STRATEGIES = ('subword', 'whole_word', 'span')
IGNORE = numerics.IGNORE_INDEX

NEGATIVE, POSITIVE = 0, 1


@dataclass
class MaskingConfig:
    select_rate: float = 0.15
    mask_rate: float = 0.8
    random_rate: float = 0.1
    keep_rate: float = 0.1
    strategy: str = 'span'
    span_p: float = 1 / 3
    span_mod: int = 10

    @property
    def action_probabilities(self):
        return [self.mask_rate, self.random_rate, self.keep_rate]

    def validate(self):
        if not 0.0 <= self.select_rate < 1.0:
            raise ConfigError(f'select_rate must lie in [0, 1), got {self.select_rate}')
        rates = self.action_probabilities
        if any(r < 0.0 or r > 1.0 for r in rates) or abs(sum(rates) - 1.0) > 1e-9:
            raise ConfigError(f'mask/random/keep rates must be probabilities summing to 1, got {rates}')
        if self.strategy not in STRATEGIES:
            raise ConfigError(f'strategy must be one of {STRATEGIES}, got {self.strategy!r}')
        if not 0.0 < self.span_p < 1.0:
            raise ConfigError(f'span_p must lie in (0, 1), got {self.span_p}')
        if self.span_mod < 2:
            raise ConfigError(f'span_mod must be at least 2, got {self.span_mod}')
        return self


@dataclass
class MaskPlan:
    actions: Dict[int, str] = field(default_factory=dict)

    @property
    def selected(self):
        return set(self.actions)

    def __len__(self):
        return len(self.actions)


@dataclass
class SegmentPair:
    segment_a: List[int]
    segment_b: List[int]
    label: int
    objective: str


def _draw_actions(rng, cfg, count):
    return rng.choice(len(ACTIONS), size=count, p=cfg.action_probabilities)


def _candidates(ids, specials):
    return [position for position, token in enumerate(ids) if token not in specials]


def plan_subword(ids, specials, cfg, rng):
    """
    Every non-special position is selected independently.
    """
    candidates = np.array(_candidates(ids, specials), dtype=np.int64)
    if cfg.select_rate == 0.0 or candidates.size == 0:
        return MaskPlan()
    chosen = candidates[rng.random(candidates.size) < cfg.select_rate]
    actions = _draw_actions(rng, cfg, chosen.size)
    return MaskPlan({int(p): ACTIONS[a] for p, a in zip(chosen, actions)})


def _check_partition(word_boundaries, candidates):
    covered = []
    for start, end in word_boundaries:
        if end <= start:
            raise MaskingError(f'empty word span ({start}, {end})')
        covered.extend(range(start, end))
    if sorted(covered) != candidates:
        raise MaskingError('word boundaries do not partition the non-special positions')


def plan_whole_word(ids, word_boundaries, specials, cfg, rng):
    """
    Select random words until the covered share of non-special subwords
    reaches the selection rate; the last word may overshoot. All pieces of a
    word share one action.
    """
    candidates = _candidates(ids, specials)
    _check_partition(word_boundaries, candidates)
    if cfg.select_rate == 0.0 or not candidates:
        return MaskPlan()

    target = cfg.select_rate * len(candidates)
    plan = MaskPlan()
    for index in rng.permutation(len(word_boundaries)):
        if len(plan) >= target:
            break
        start, end = word_boundaries[index]
        action = ACTIONS[_draw_actions(rng, cfg, 1)[0]]
        for position in range(start, end):
            plan.actions[position] = action
    return plan


def draw_span_length(rng, p, mod):
    """
    Failure-count geometric draw reduced modulo `mod`; zero is redrawn.
    """
    while True:
        length = (int(rng.geometric(p)) - 1) % mod
        if length:
            return length


def expected_span_length(p, mod):
    """
    Exact mean of draw_span_length.
    """
    q = 1.0 - p
    residues = np.arange(mod)
    mass = p * q ** residues / (1.0 - q ** mod)
    return float((residues[1:] * mass[1:]).sum() / (1.0 - mass[0]))


def plan_span(ids, specials, cfg, rng):
    """
    Mark random spans until the selection rate is reached. Spans start on a
    non-special position and stop at the next special token or the end.
    One action is drawn per span.
    """
    candidates = _candidates(ids, specials)
    if cfg.select_rate == 0.0 or not candidates:
        return MaskPlan()

    target = cfg.select_rate * len(candidates)
    plan = MaskPlan()
    while len(plan) < target:
        length = draw_span_length(rng, cfg.span_p, cfg.span_mod)
        start = candidates[int(rng.integers(len(candidates)))]
        action = ACTIONS[_draw_actions(rng, cfg, 1)[0]]
        position = start
        while position < len(ids) and position < start + length and ids[position] not in specials:
            plan.actions.setdefault(position, action)
            position += 1
    return plan


def plan_for(ids, vocab, cfg, rng):
    specials = vocab.special_ids
    if cfg.strategy == 'subword':
        return plan_subword(ids, specials, cfg, rng)
    if cfg.strategy == 'whole_word':
        return plan_whole_word(ids, word_spans(ids, vocab), specials, cfg, rng)
    return plan_span(ids, specials, cfg, rng)


def apply_plan(ids, plan, vocab, rng):
    """
    Returns (corrupted ids, targets); targets are IGNORE off the plan.
    """
    corrupted = np.array(ids, dtype=np.int64)
    targets = np.full(len(corrupted), IGNORE, dtype=np.int64)
    for position in sorted(plan.actions):
        if not 0 <= position < len(corrupted):
            raise MaskingError(f'plan position {position} outside a sequence of length {len(corrupted)}')
        targets[position] = corrupted[position]
        action = plan.actions[position]
        if action == MASK:
            corrupted[position] = MASK_ID
        elif action == RANDOM:
            corrupted[position] = int(rng.integers(len(SPECIAL_TOKENS), len(vocab)))
    return corrupted, targets


def make_pairs(documents, objective, rng, budget=None):
    """
    Endless stream of SegmentPair drawn from documents given as lists of
    segments (token id lists). Labels are balanced in expectation.

    document: a positive pairs consecutive segments; a negative takes its
    second segment from another document.
    order: a positive keeps two adjacent segments in order; a negative swaps them.
    """
    if objective not in ('document', 'order'):
        raise ConfigError(f'pair objective must be document or order, got {objective!r}')
    documents = [list(doc) for doc in documents if doc]
    if objective == 'document' and len(documents) < 2:
        raise DatasetError('the document objective needs at least two documents')
    paired = [index for index, doc in enumerate(documents) if len(doc) >= 2]
    if not paired:
        raise DatasetError('no document has two consecutive segments')

    while True:
        doc_index = paired[int(rng.integers(len(paired)))]
        doc = documents[doc_index]
        i = int(rng.integers(len(doc) - 1))
        first, second = doc[i], doc[i + 1]
        label = POSITIVE if rng.random() < 0.5 else NEGATIVE

        if label == NEGATIVE and objective == 'order':
            first, second = second, first
        elif label == NEGATIVE:
            other = int(rng.integers(len(documents) - 1))
            other += other >= doc_index
            second = documents[other][int(rng.integers(len(documents[other])))]

        if budget is not None:
            first, second, _ = truncate_pair(first, second, budget)
        yield SegmentPair(list(first), list(second), label, objective)


def total_loss(mlm_logits, mlm_targets, nsp_logits=None, nsp_labels=None):
    """
    Mean cross-entropy over the non-ignored masked positions, plus the
    sentence-pair cross-entropy with unit weight when a pair head is present.
    """
    if int((mlm_targets != IGNORE).sum()) == 0:
        raise MaskingError('no target positions to score')
    loss = numerics.cross_entropy(mlm_logits, mlm_targets)
    if nsp_logits is not None:
        if nsp_labels is None:
            raise MaskingError('pair logits given without pair labels')
        loss = loss + numerics.cross_entropy(nsp_logits, nsp_labels)
    return loss


@dataclass
class Batch:
    ids: torch.Tensor
    targets: torch.Tensor
    padding_mask: torch.Tensor
    segment_ids: torch.Tensor
    nsp_labels: Optional[torch.Tensor] = None

    @property
    def num_targets(self):
        return int((self.targets != IGNORE).sum())


def batch_rng(base_seed, batch_index):
    return np.random.default_rng(int(base_seed) ^ int(batch_index))


def collate(rows, nsp_labels=None):
    """
    Right-pad (ids, targets, segments) rows into a Batch.
    """
    width = max(len(ids) for ids, _, _ in rows)
    ids = np.full((len(rows), width), PAD_ID, dtype=np.int64)
    targets = np.full((len(rows), width), IGNORE, dtype=np.int64)
    segments = np.zeros((len(rows), width), dtype=np.int64)
    for row, (row_ids, row_targets, row_segments) in enumerate(rows):
        ids[row, :len(row_ids)] = row_ids
        targets[row, :len(row_targets)] = row_targets
        segments[row, :len(row_segments)] = row_segments
    return Batch(
        ids=torch.from_numpy(ids),
        targets=torch.from_numpy(targets),
        padding_mask=torch.from_numpy(ids == PAD_ID),
        segment_ids=torch.from_numpy(segments),
        nsp_labels=torch.tensor(nsp_labels, dtype=torch.int64) if nsp_labels is not None else None,
    )


def mlm_batch(sequences, vocab, cfg, rng):
    rows = []
    for ids in sequences:
        plan = plan_for(ids, vocab, cfg, rng)
        corrupted, targets = apply_plan(ids, plan, vocab, rng)
        rows.append((corrupted, targets, [0] * len(ids)))
    return collate(rows)


def pair_batch(pairs, vocab, cfg, rng):
    rows, labels = [], []
    for pair in pairs:
        ids = [CLS_ID] + pair.segment_a + [SEP_ID] + pair.segment_b + [SEP_ID]
        segments = [0] * (len(pair.segment_a) + 2) + [1] * (len(pair.segment_b) + 1)
        plan = plan_for(ids, vocab, cfg, rng)
        corrupted, targets = apply_plan(ids, plan, vocab, rng)
        rows.append((corrupted, targets, segments))
        labels.append(pair.label)
    return collate(rows, labels)


def prefetch(build, indices, threads=1):
    """
    Yield build(index) for each index, in index order. With threads > 1 the
    batches are built ahead on a worker pool.
    """
    if threads <= 1:
        for index in indices:
            yield build(index)
        return
    pending = deque()
    indices = iter(indices)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        for index in itertools.islice(indices, 2 * threads):
            pending.append(pool.submit(build, index))
        while pending:
            batch = pending.popleft().result()
            for index in itertools.islice(indices, 1):
                pending.append(pool.submit(build, index))
            yield batch
